"""Deployment: packed model files, bit-plane popcount kernels, and runtime
precision switching with no retraining and no data.

A packed model stores each quantized layer as 8-bit codes plus the layer's
mean-absolute-weight scale basis, the full-precision first/last layer
weights, and every BatchNorm state. Loading at n bits derives codes by
shifting off least-significant bits and recomputes the scale as
mean|w| / (2^n - 1), so the dequantized range stays anchored to mean|w|
at every n.

Quantized layers execute exactly in integers: codes are split into bit
planes packed into little-endian 64-bit words (row tails zero-padded) and
dot products reduce to AND + popcount per plane pair. Kernels favor
exactness over speed. Loaded models are immutable; concurrent inference is
safe.

Binary layout (all little-endian, golden-file locked):

    magic   7 bytes  b"APDNN1\\0"
    version u16
    count   u32      number of sections
    section: name_len u16, name utf-8, payload_len u64, payload
    sections in order: "meta" (JSON), "layers", "bn"
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError, DimensionError, PrecisionUnavailableError, UsageError
from .network import (
    AnyPrecisionModel,
    ActQuantSpec,
    BatchNormSpec,
    ConvSpec,
    FlattenSpec,
    LinearSpec,
    MaxPoolSpec,
    ReluSpec,
    parse_architecture,
)
from .quantize import QuantScheme, bitshift_truncate, quantize_activations, quantize_weights
from .tensor import im2col

MAGIC = b"APDNN1\x00"
VERSION = 1
STORAGE_BITS = 8


# ---------------------------------------------------------------------------
# bit planes and popcount kernels
# ---------------------------------------------------------------------------


@dataclass
class BitPlaneMatrix:
    """One packed binary matrix per bit position of an integer code matrix."""

    n_bits: int
    rows: int
    cols: int
    planes: np.ndarray  # uint64 of shape (n_bits, rows, words)

    @property
    def words(self) -> int:
        return self.planes.shape[2]


def pack_bitplanes(codes: np.ndarray, n_bits: int) -> BitPlaneMatrix:
    """Split a (rows, cols) code matrix into packed bit planes.

    Words are little-endian 64-bit; row tails are zero-padded (asserted by
    construction since the source bits beyond ``cols`` are absent).
    """
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise DimensionError(f"pack_bitplanes expects a 2-D matrix, got {codes.shape}")
    if codes.size and int(codes.max()) >= (1 << n_bits):
        raise InputError(f"codes exceed {n_bits}-bit range")
    codes = np.ascontiguousarray(codes)
    rows, cols = codes.shape
    pad_bits = (-cols) % 64
    planes = []
    for p in range(n_bits):
        bits = ((codes >> p) & 1).astype(np.uint8)
        if pad_bits:
            bits = np.concatenate([bits, np.zeros((rows, pad_bits), dtype=np.uint8)], axis=1)
        packed = np.ascontiguousarray(np.packbits(bits, axis=1, bitorder="little"))
        planes.append(packed.view(np.uint64))
    mat = BitPlaneMatrix(n_bits=n_bits, rows=rows, cols=cols,
                         planes=np.stack(planes) if planes else np.zeros((0, rows, 0), np.uint64))
    return mat


def unpack_bitplanes(mat: BitPlaneMatrix) -> np.ndarray:
    """Reconstruct the original code matrix; exact inverse of pack_bitplanes."""
    out = np.zeros((mat.rows, mat.cols), dtype=np.int64)
    for p in range(mat.n_bits):
        bytes_view = mat.planes[p].view(np.uint8)
        bits = np.unpackbits(bytes_view, axis=1, bitorder="little")[:, : mat.cols]
        out += bits.astype(np.int64) << p
    return out


def popcount_dot(w_planes: BitPlaneMatrix, x_planes: BitPlaneMatrix) -> np.ndarray:
    """Exact integer dot products via AND + popcount over plane pairs.

    Returns int64 of shape (w_rows, x_rows) equal to
    sum_i w_code[r, i] * x_code[s, i].
    """
    if w_planes.cols != x_planes.cols:
        raise DimensionError(
            f"inner dimensions disagree: {w_planes.cols} vs {x_planes.cols}"
        )
    out = np.zeros((w_planes.rows, x_planes.rows), dtype=np.int64)
    for p in range(w_planes.n_bits):
        wp = w_planes.planes[p]
        for q in range(x_planes.n_bits):
            xq = x_planes.planes[q]
            counts = np.bitwise_count(wp[:, None, :] & xq[None, :, :]).sum(
                axis=2, dtype=np.int64
            )
            out += counts << (p + q)
    return out


# ---------------------------------------------------------------------------
# packed model representation
# ---------------------------------------------------------------------------


@dataclass
class PackedLayer:
    name: str
    kind: str  # "conv" | "linear"
    is_fp: bool
    dims: tuple[int, ...]  # conv: (out,in,k,stride,pad); linear: (in,out)
    codes: np.ndarray | None      # uint8 (8-bit) codes, master layout
    scale_basis: float | None     # mean |w| of the master at save time
    weights: np.ndarray | None    # float32, only for full-precision layers
    bias: np.ndarray


@dataclass
class PackedBNState:
    bits: int
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass
class PackedBN:
    name: str
    channels: int
    decay: float
    epsilon: float
    states: list[PackedBNState]


@dataclass
class PackedModel:
    """Deployment artifact: 8-bit codes, scales, all BN copies, metadata."""

    arch_text: str
    bits: list[int]
    layers: list[PackedLayer]
    bn: list[PackedBN]
    version: int = VERSION

    def to_bytes(self) -> bytes:
        meta = json.dumps(
            {"arch": self.arch_text, "bits": list(self.bits)},
            sort_keys=True, separators=(",", ":"),
        ).encode()

        chunks = []
        for l in self.layers:
            name = l.name.encode()
            kind = 1 if l.kind == "conv" else 0
            head = struct.pack("<H", len(name)) + name + struct.pack("<BB", kind, int(l.is_fp))
            head += struct.pack("<B", len(l.dims)) + struct.pack(f"<{len(l.dims)}I", *l.dims)
            if l.is_fp:
                w = l.weights.astype("<f4").tobytes()
                body = struct.pack("<Q", len(w)) + w
            else:
                c = l.codes.astype(np.uint8).tobytes()
                body = struct.pack("<Q", len(c)) + c + struct.pack("<f", l.scale_basis)
            b = l.bias.astype("<f4").tobytes()
            body += struct.pack("<Q", len(b)) + b
            chunks.append(head + body)
        layers_payload = struct.pack("<I", len(self.layers)) + b"".join(chunks)

        chunks = []
        for bn in self.bn:
            name = bn.name.encode()
            head = struct.pack("<H", len(name)) + name
            head += struct.pack("<Iff", bn.channels, bn.decay, bn.epsilon)
            head += struct.pack("<H", len(bn.states))
            body = b""
            for st in sorted(bn.states, key=lambda s: s.bits):
                body += struct.pack("<B", st.bits)
                for arr in (st.gamma, st.beta, st.mean, st.var):
                    body += arr.astype("<f4").tobytes()
            chunks.append(head + body)
        bn_payload = struct.pack("<I", len(self.bn)) + b"".join(chunks)

        out = MAGIC + struct.pack("<H", self.version) + struct.pack("<I", 3)
        for name, payload in (("meta", meta), ("layers", layers_payload), ("bn", bn_payload)):
            nb = name.encode()
            out += struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload
        return out

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "PackedModel":
        r = _Reader(raw, source)
        if r.take(len(MAGIC)) != MAGIC:
            raise FormatError(f"{source}: bad magic at offset 0 (expected APDNN1)")
        version = r.u16()
        if version != VERSION:
            raise FormatError(f"{source}: unsupported format version {version}")
        sections = {}
        for _ in range(r.u32()):
            name = r.take(r.u16()).decode()
            sections[name] = r.take(r.u64())
        for need in ("meta", "layers", "bn"):
            if need not in sections:
                raise FormatError(f"{source}: missing section {need!r}")
        meta = json.loads(sections["meta"].decode())

        r = _Reader(sections["layers"], source + "#layers")
        layers = []
        for _ in range(r.u32()):
            name = r.take(r.u16()).decode()
            kind_b, is_fp = struct.unpack("<BB", r.take(2))
            ndims = struct.unpack("<B", r.take(1))[0]
            dims = struct.unpack(f"<{ndims}I", r.take(4 * ndims))
            kind = "conv" if kind_b == 1 else "linear"
            codes = weights = scale = None
            if is_fp:
                w = np.frombuffer(r.take(r.u64()), dtype="<f4")
                shape = (dims[0], dims[1], dims[2], dims[2]) if kind == "conv" else (dims[0], dims[1])
                weights = w.reshape(shape).copy()
            else:
                codes_flat = np.frombuffer(r.take(r.u64()), dtype=np.uint8)
                shape = (dims[0], dims[1], dims[2], dims[2]) if kind == "conv" else (dims[0], dims[1])
                codes = codes_flat.reshape(shape).copy()
                scale = struct.unpack("<f", r.take(4))[0]
            bias = np.frombuffer(r.take(r.u64()), dtype="<f4").copy()
            layers.append(PackedLayer(name=name, kind=kind, is_fp=bool(is_fp), dims=dims,
                                      codes=codes, scale_basis=scale, weights=weights, bias=bias))

        r = _Reader(sections["bn"], source + "#bn")
        bns = []
        for _ in range(r.u32()):
            name = r.take(r.u16()).decode()
            channels, decay, eps = struct.unpack("<Iff", r.take(12))
            n_states = struct.unpack("<H", r.take(2))[0]
            states = []
            for _ in range(n_states):
                bits = struct.unpack("<B", r.take(1))[0]
                arrs = [np.frombuffer(r.take(4 * channels), dtype="<f4").copy() for _ in range(4)]
                states.append(PackedBNState(bits, *arrs))
            bns.append(PackedBN(name=name, channels=channels, decay=decay, epsilon=eps, states=states))

        return cls(arch_text=meta["arch"], bits=list(meta["bits"]), layers=layers,
                   bn=bns, version=version)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated at offset {self.pos} (need {n} bytes)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


# ---------------------------------------------------------------------------
# pack / save / load
# ---------------------------------------------------------------------------


def pack_model(model: AnyPrecisionModel) -> PackedModel:
    """Freeze a trained model into the deployment format (codes at 8 bits)."""
    layers = []
    scheme8 = QuantScheme(STORAGE_BITS)
    for spec in model.arch.parametric():
        w = model.params[f"{spec.name}.weight"].data
        b = model.params[f"{spec.name}.bias"].data
        if isinstance(spec, ConvSpec):
            kind, dims = "conv", (spec.out_channels, spec.in_channels, spec.kernel, spec.stride, spec.pad)
        else:
            kind, dims = "linear", (spec.in_features, spec.out_features)
        if spec.full_precision:
            layers.append(PackedLayer(spec.name, kind, True, dims, None, None, w.copy(), b.copy()))
        else:
            q = quantize_weights(w, scheme8)
            basis = float(np.abs(w.astype(np.float64)).mean())
            layers.append(PackedLayer(spec.name, kind, False, dims, q.codes, basis, None, b.copy()))

    bns = []
    for spec in model.arch.batchnorms():
        bank = model.banks[spec.name]
        states = [
            PackedBNState(bits, st.gamma.data.copy(), st.beta.data.copy(),
                          st.running_mean.copy(), st.running_var.copy())
            for bits, st in sorted(bank.states.items())
        ]
        any_state = next(iter(bank.states.values()))
        bns.append(PackedBN(spec.name, spec.channels, any_state.decay, any_state.epsilon, states))

    return PackedModel(arch_text=model.arch.to_text(), bits=model.available_bits(),
                       layers=layers, bn=bns)


def save_model(model, path) -> PackedModel:
    """Write a model (or an already-packed model) to a packed file."""
    packed = model if isinstance(model, PackedModel) else pack_model(model)
    try:
        with open(path, "wb") as fh:
            fh.write(packed.to_bytes())
    except OSError as e:
        raise FormatError(f"cannot write packed model to {path}: {e}") from e
    return packed


def load_packed(path) -> PackedModel:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise FormatError(f"cannot read packed model from {path}: {e}") from e
    return PackedModel.from_bytes(raw, source=str(path))


# ---------------------------------------------------------------------------
# integer execution
# ---------------------------------------------------------------------------


@dataclass
class _RuntimeLayer:
    spec: object
    is_fp: bool
    weights: np.ndarray | None          # float path
    w_planes: BitPlaneMatrix | None     # integer path, rows = outputs
    max_w: int | None
    scale: float | None
    bias: np.ndarray | None


def integer_layer_forward(x_codes: np.ndarray, layer: _RuntimeLayer,
                          n_w_bits: int, n_a_bits: int) -> np.ndarray:
    """Exact integer evaluation of one quantized layer.

    Uses dot(w_signed, x) = 2*popcount_dot(w_codes, x) - MAX_w * sum(x),
    then y = scale * dot / MAX_act + bias, in float64 cast to float32.
    """
    max_w = (1 << n_w_bits) - 1
    max_a = (1 << n_a_bits) - 1
    spec = layer.spec
    if isinstance(spec, ConvSpec):
        b = x_codes.shape[0]
        cols = im2col(x_codes.astype(np.int64), spec.kernel, spec.kernel, spec.stride, spec.pad)
        d, p = cols.shape[1], cols.shape[2]
        flat = cols.transpose(0, 2, 1).reshape(b * p, d)
        x_planes = pack_bitplanes(flat, n_a_bits)
        pop = popcount_dot(layer.w_planes, x_planes)            # (O, B*P)
        ssum = flat.sum(axis=1, dtype=np.int64)                 # (B*P,)
        signed_dot = 2 * pop - max_w * ssum[None, :]
        y = layer.scale / max_w * (signed_dot.astype(np.float64) / max_a)
        y = y + layer.bias.astype(np.float64)[:, None]
        ho = (x_codes.shape[2] + 2 * spec.pad - spec.kernel) // spec.stride + 1
        wo = (x_codes.shape[3] + 2 * spec.pad - spec.kernel) // spec.stride + 1
        return y.reshape(spec.out_channels, b, ho, wo).transpose(1, 0, 2, 3).astype(np.float32)
    else:
        x_planes = pack_bitplanes(x_codes.astype(np.int64), n_a_bits)
        pop = popcount_dot(layer.w_planes, x_planes)            # (O, B)
        ssum = x_codes.sum(axis=1, dtype=np.int64)              # (B,)
        signed_dot = 2 * pop - max_w * ssum[None, :]
        y = layer.scale / max_w * (signed_dot.astype(np.float64) / max_a)
        y = (y + layer.bias.astype(np.float64)[:, None]).T
        return y.astype(np.float32)


def _float_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b = x.shape[0]
    o = w.shape[0]
    cols = im2col(x.astype(np.float64), w.shape[2], w.shape[3], stride, pad)
    out = np.matmul(w.reshape(o, -1).astype(np.float64), cols)
    ho = (x.shape[2] + 2 * pad - w.shape[2]) // stride + 1
    wo = (x.shape[3] + 2 * pad - w.shape[3]) // stride + 1
    return out.reshape(b, o, ho, wo).astype(np.float32)


def _maxpool(x: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // k, k, w // k, k).max(axis=(3, 5))


class InferenceModel:
    """An executable, immutable view of a packed model at one bit-width."""

    def __init__(self, packed: PackedModel, runtime_bits: int, bn_bits: int | None = None):
        self.packed = packed
        self.runtime_bits = runtime_bits
        self.bn_bits = runtime_bits if bn_bits is None else bn_bits
        self.arch = parse_architecture(packed.arch_text)

        if not 1 <= runtime_bits <= STORAGE_BITS:
            # the packed artifact has no float master; full-precision eval
            # runs on the checkpoint/training path instead
            raise UsageError(
                f"packed models serve runtime bits 1..{STORAGE_BITS}; "
                f"got {runtime_bits} (use the checkpoint for full precision)"
            )
        for bn in packed.bn:
            if self.bn_bits not in {s.bits for s in bn.states}:
                raise PrecisionUnavailableError(self.bn_bits, {s.bits for s in bn.states})

        self._bn = {bn.name: bn for bn in packed.bn}
        self._layers: dict[str, _RuntimeLayer] = {}
        by_name = {l.name: l for l in packed.layers}
        for spec in self.arch.parametric():
            pl = by_name[spec.name]
            if pl.is_fp:
                self._layers[spec.name] = _RuntimeLayer(spec, True, pl.weights, None, None, None, pl.bias)
            else:
                codes_n = bitshift_truncate(pl.codes, STORAGE_BITS, runtime_bits)
                mat = codes_n.reshape(pl.codes.shape[0], -1) if pl.kind == "conv" else codes_n.T
                self._layers[spec.name] = _RuntimeLayer(
                    spec, False, None,
                    pack_bitplanes(mat.astype(np.int64), runtime_bits),
                    (1 << runtime_bits) - 1,
                    pl.scale_basis,  # scale applied as basis / MAX_w inside the kernel
                    pl.bias,
                )

    def switch_bits(self, runtime_bits: int, bn_bits: int | None = None) -> "InferenceModel":
        return InferenceModel(self.packed, runtime_bits, bn_bits)

    def codes_at(self, name: str) -> np.ndarray:
        """Runtime codes of a quantized layer (after the bit shift)."""
        rl = self._layers[name]
        if rl.w_planes is None:
            raise UsageError(f"layer {name} runs in float at {self.runtime_bits} bits")
        return unpack_bitplanes(rl.w_planes)

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Full forward pass; quantized layers run on the integer path."""
        x = np.asarray(x, dtype=np.float32)
        scheme = QuantScheme(self.runtime_bits)
        h: np.ndarray = x          # float activations
        codes: np.ndarray | None = None  # integer codes when on the code grid

        for spec in self.arch.layers:
            if isinstance(spec, (ConvSpec, LinearSpec)):
                rl = self._layers[spec.name]
                if rl.is_fp:
                    if codes is not None:
                        h = (codes.astype(np.float64) / scheme.max_n).astype(np.float32)
                        codes = None
                    if isinstance(spec, ConvSpec):
                        h = _float_conv(h, rl.weights, spec.stride, spec.pad)
                        h = h + rl.bias[None, :, None, None]
                    else:
                        h = np.matmul(h.astype(np.float64), rl.weights.astype(np.float64)).astype(np.float32)
                        h = h + rl.bias[None, :]
                else:
                    if codes is None:
                        raise UsageError(f"quantized layer {spec.name} needs quantized input")
                    h = integer_layer_forward(codes, rl, self.runtime_bits, self.runtime_bits)
                    codes = None
            elif isinstance(spec, BatchNormSpec):
                bn = self._bn[spec.name]
                st = next(s for s in bn.states if s.bits == self.bn_bits)
                inv = 1.0 / np.sqrt(st.var.astype(np.float64) + bn.epsilon)
                gshape = (1, -1) if h.ndim == 2 else (1, -1, 1, 1)
                h64 = (h.astype(np.float64) - st.mean.astype(np.float64).reshape(gshape)) * inv.reshape(gshape)
                h = (h64 * st.gamma.astype(np.float64).reshape(gshape)
                     + st.beta.astype(np.float64).reshape(gshape)).astype(np.float32)
            elif isinstance(spec, ActQuantSpec):
                codes, _ = quantize_activations(h, scheme)
                codes = codes.astype(np.int64)
            elif isinstance(spec, MaxPoolSpec):
                if codes is not None:
                    codes = _maxpool(codes, spec.kernel)
                else:
                    h = _maxpool(h, spec.kernel)
            elif isinstance(spec, FlattenSpec):
                if codes is not None:
                    codes = codes.reshape(codes.shape[0], -1)
                else:
                    h = h.reshape(h.shape[0], -1)
            elif isinstance(spec, ReluSpec):
                if codes is not None:
                    h = (codes.astype(np.float64) / scheme.max_n).astype(np.float32)
                    codes = None
                h = np.maximum(h, 0.0)
        if codes is not None:
            h = (codes.astype(np.float64) / scheme.max_n).astype(np.float32)
        return h


def load_model(path, runtime_bits: int, bn_bits: int | None = None) -> InferenceModel:
    """Load a packed file and bind it to a runtime bit-width."""
    return InferenceModel(load_packed(path), runtime_bits, bn_bits=bn_bits)


def infer(model: InferenceModel, x, runtime_bits: int | None = None) -> np.ndarray:
    """Run inference, optionally re-binding to another bit-width for the call."""
    if runtime_bits is not None and runtime_bits != model.runtime_bits:
        model = model.switch_bits(runtime_bits)
    return model.infer(x)
