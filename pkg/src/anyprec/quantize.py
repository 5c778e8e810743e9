"""Uniform weight/activation quantizers and their straight-through gradients.

Weights: tanh-normalize the layer into [0,1], round onto the N-bit grid,
remap to symmetric signed codes, and carry one scale per layer equal to
mean(|w|)/MAX_N, so dequantized weights span [-mean|w|, +mean|w|].

Activations: clip to [0,1] and round onto the N-bit grid; the code/MAX_N
value is what flows forward.

Backward rules treat rounding as identity (straight-through); the layer
max used in normalization and the scale are treated as constants.

All rounding and normalization happen in float64 so codes are exactly
reproducible; emitted tensors keep the caller's dtype. Everything here is
pure and stateless, safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, UsageError
from .tensor import Tensor

FULL_PRECISION = 32

# Ties round away from zero, fixed globally for cross-platform determinism.


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0 or x.size == 0 or x.min() >= 0:
        return np.floor(x + 0.5)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantScheme:
    """A bit-width setting: 1..8 bits, or FULL_PRECISION (32)."""

    n_bits: int

    def __post_init__(self):
        if self.n_bits != FULL_PRECISION and not 1 <= self.n_bits <= 8:
            raise InputError(f"n_bits must be in [1,8] or {FULL_PRECISION}, got {self.n_bits}")

    @property
    def is_full_precision(self) -> bool:
        return self.n_bits == FULL_PRECISION

    @property
    def max_n(self) -> int:
        if self.is_full_precision:
            raise UsageError("max_n is undefined for the full-precision scheme")
        return (1 << self.n_bits) - 1


@dataclass
class QuantizedWeights:
    """Integer codes, their signed remap, and the layer scale for one layer."""

    codes: np.ndarray   # uint8, in [0, max_n]
    signed: np.ndarray  # int16, 2*codes - max_n
    scale: float        # mean(|w|) / max_n
    n_bits: int

    def dequantized(self, dtype=np.float32) -> np.ndarray:
        return (self.scale * self.signed.astype(np.float64)).astype(dtype)


def normalize_weights(w) -> np.ndarray:
    """Map a weight tensor into [0,1] via layer-wise tanh normalization.

    An all-zero (or vanishing) layer maps to all 0.5 rather than dividing
    by zero.
    """
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    if data.size == 0:
        raise InputError("cannot normalize an empty weight tensor")
    t = np.tanh(data.astype(np.float64))
    m = np.abs(t).max()
    if m < 1e-12:
        return np.full(data.shape, 0.5)
    return t / (2.0 * m) + 0.5


def quantize_weights(w, scheme: QuantScheme) -> QuantizedWeights:
    if scheme.is_full_precision:
        raise UsageError("quantize_weights requires a quantized scheme, not FULL_PRECISION")
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    wn = normalize_weights(data)
    max_n = scheme.max_n
    codes = round_half_away(wn * max_n).astype(np.uint8)
    signed = (2 * codes.astype(np.int16) - max_n).astype(np.int16)
    scale = float(np.abs(data.astype(np.float64)).mean()) / max_n
    return QuantizedWeights(codes=codes, signed=signed, scale=scale, n_bits=scheme.n_bits)


def weight_quantizer_vjp(upstream: np.ndarray, ctx: dict) -> np.ndarray:
    """Straight-through gradient of the weight quantizer.

    Rounding is identity; the layer max and the scale are constants; tanh
    is differentiated exactly. The surrogate is then
    ``scale * max_n * tanh(w) / max|tanh(w)|``.
    """
    tanh_w = ctx["tanh_w"]
    max_tanh = ctx["max_tanh"]
    if max_tanh < 1e-12:
        return np.zeros_like(upstream)
    coeff = ctx["scale"] * ctx["max_n"] / max_tanh
    return (upstream.astype(np.float64) * coeff * (1.0 - tanh_w * tanh_w)).astype(upstream.dtype)


def weight_quantize_ste(w: Tensor, scheme: QuantScheme, cache: dict | None = None) -> Tensor:
    """Tape op: dequantized weights forward, straight-through backward.

    ``cache`` (keyed by weight identity) may be passed while the master
    weights are frozen, e.g. across bit branches within one training step
    or across batches of an evaluation pass; it skips recomputing the tanh
    normalization and per-bit codes.
    """
    if scheme.is_full_precision:
        return w
    entry = cache.get(id(w)) if cache is not None else None
    if entry is None:
        w64 = w.data.astype(np.float64)
        tanh_w = np.tanh(w64)
        max_tanh = float(np.abs(tanh_w).max())
        if max_tanh < 1e-12:
            normalized = np.full(w64.shape, 0.5)
        else:
            normalized = tanh_w / (2.0 * max_tanh) + 0.5
        entry = {
            "tanh_w": tanh_w,
            "max_tanh": max_tanh,
            "norm": normalized,
            "mean_abs": float(np.abs(w64).mean()),
            "deq": {},
        }
        if cache is not None:
            cache[id(w)] = entry
    max_n = scheme.max_n
    hit = entry["deq"].get(max_n)
    if hit is None:
        codes = round_half_away(entry["norm"] * max_n)
        scale = entry["mean_abs"] / max_n
        out = (scale * (2.0 * codes - max_n)).astype(w.data.dtype)
        ctx = {"tanh_w": entry["tanh_w"], "max_tanh": entry["max_tanh"],
               "scale": scale, "max_n": max_n}
        hit = (out, ctx)
        entry["deq"][max_n] = hit
    out, ctx = hit
    return Tensor.from_op(out, (w,), lambda g: (weight_quantizer_vjp(g, ctx),), op="weight_quant")


def quantize_activations(y, scheme: QuantScheme):
    """Clip to [0,1] and round onto the N-bit grid.

    Returns ``(codes, value)`` where value == codes / max_n exactly; the
    full-precision scheme returns ``(None, y)`` unchanged.
    """
    data = y.data if isinstance(y, Tensor) else np.asarray(y)
    if scheme.is_full_precision:
        return None, data
    max_n = scheme.max_n
    clipped = np.clip(data.astype(np.float64), 0.0, 1.0)
    raw = round_half_away(clipped * max_n)
    bad = ~np.isfinite(raw)
    if bad.any():
        # keep divergence visible: the integer cast would silently flush NaN
        codes = np.where(bad, 0, raw).astype(np.uint8)
        value = np.where(bad, np.nan, raw / max_n).astype(data.dtype)
    else:
        codes = raw.astype(np.uint8)
        value = (raw / max_n).astype(data.dtype)
    return codes, value


def activation_quantizer_vjp(upstream: np.ndarray, ctx: dict) -> np.ndarray:
    """Pass-through on the closed interval 0 <= y <= 1, zero outside."""
    pre = ctx["pre_clip"]
    mask = (pre >= 0) & (pre <= 1)
    return upstream * mask


def act_quantize_ste(y: Tensor, scheme: QuantScheme):
    """Tape op returning (quantized-value tensor, integer codes array)."""
    if scheme.is_full_precision:
        return y, None
    codes, value = quantize_activations(y.data, scheme)
    ctx = {"pre_clip": y.data}
    out = Tensor.from_op(
        value, (y,), lambda g: (activation_quantizer_vjp(g, ctx),), op="act_quant"
    )
    return out, codes


def bitshift_truncate(codes: np.ndarray, n_src: int, n_dst: int) -> np.ndarray:
    """Drop least-significant bits to requantize codes from n_src to n_dst bits."""
    if not (1 <= n_src <= 8) or n_dst < 1:
        raise UsageError(f"bit-widths must be in [1,8], got src={n_src}, dst={n_dst}")
    if n_dst > n_src:
        raise UsageError(f"cannot widen codes from {n_src} to {n_dst} bits by shifting")
    codes = np.asarray(codes)
    if codes.size and int(codes.max()) > (1 << n_src) - 1:
        raise InputError(f"codes exceed {n_src}-bit range")
    return (codes >> (n_src - n_dst)).astype(codes.dtype)
