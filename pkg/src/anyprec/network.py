"""Layers, per-bit-width BatchNorm banks, and the multi-precision model.

A model owns one set of float32 master weights plus K independent
BatchNorm states per normalization layer, keyed by bit-width. Selecting a
bit-width binds every quantizer to N and every BatchNorm layer to its
state for N before the forward pass runs. The first and last parametric
layers always compute with the float master weights.

A model instance is single-writer: training and bit selection mutate it.
Read-only forward passes may run concurrently once training is done and
the active bit-width is fixed; clone per bit-width to serve several
precisions at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InputError, PrecisionUnavailableError
from .quantize import QuantScheme, act_quantize_ste, weight_quantize_ste
from .tensor import (
    Tensor,
    bias_add,
    conv2d,
    matmul,
    maxpool2d,
    relu,
    reshape,
)

BN_DECAY = 0.9
BN_EPSILON = 1e-5


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """One bit-width's BatchNorm parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    decay: float = BN_DECAY
    epsilon: float = BN_EPSILON

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    @classmethod
    def fresh(cls, channels: int, decay: float = BN_DECAY, epsilon: float = BN_EPSILON):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=np.float32), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            decay=decay,
            epsilon=epsilon,
        )


class BatchNormBank:
    """Independent BatchNorm states keyed by bit-width."""

    def __init__(self, channels: int):
        self.channels = channels
        self.states: dict[int, BatchNormState] = {}

    def add(self, bits: int, state: BatchNormState | None = None) -> BatchNormState:
        st = state or BatchNormState.fresh(self.channels)
        if st.channels != self.channels:
            raise DimensionError(
                f"BN state has {st.channels} channels, bank expects {self.channels}"
            )
        self.states[bits] = st
        return st

    def get(self, bits: int) -> BatchNormState:
        try:
            return self.states[bits]
        except KeyError:
            raise PrecisionUnavailableError(bits, self.states.keys()) from None

    def bits(self) -> list[int]:
        return sorted(self.states)

    def __contains__(self, bits: int) -> bool:
        return bits in self.states


def _bn_axes(x: np.ndarray):
    if x.ndim == 2:
        return (0,), x.shape[0]
    if x.ndim == 4:
        return (0, 2, 3), x.shape[0] * x.shape[2] * x.shape[3]
    raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")


def _bn_expand(v: np.ndarray, ndim: int) -> np.ndarray:
    return v if ndim == 2 else v[None, :, None, None]


def batchnorm_forward(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize per channel; training mode also updates running statistics.

    Uses population (biased) variance. Gradients flow to gamma, beta, and x.
    """
    axes, m = _bn_axes(x.data)
    ndim = x.data.ndim
    x64 = x.data.astype(np.float64)
    gamma, beta = state.gamma, state.beta
    g64 = gamma.data.astype(np.float64)

    if training:
        if x.data.shape[0] < 2:
            raise InputError("training-mode batchnorm needs a batch of at least 2")
        mu = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        state.running_mean = (
            state.decay * state.running_mean + (1.0 - state.decay) * mu
        ).astype(np.float32)
        state.running_var = (
            state.decay * state.running_var + (1.0 - state.decay) * var
        ).astype(np.float32)
    else:
        mu = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)

    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x64 - _bn_expand(mu, ndim)) * _bn_expand(inv_std, ndim)
    out = (xhat * _bn_expand(g64, ndim) + _bn_expand(beta.data.astype(np.float64), ndim)).astype(
        x.data.dtype
    )

    if training:

        def vjp(g):
            g64_up = g.astype(np.float64)
            dbeta = g64_up.sum(axis=axes)
            dgamma = (g64_up * xhat).sum(axis=axes)
            gmean = g64_up.mean(axis=axes)
            gx_mean = (g64_up * xhat).mean(axis=axes)
            dx = (
                _bn_expand(g64 * inv_std, ndim)
                * (g64_up - _bn_expand(gmean, ndim) - xhat * _bn_expand(gx_mean, ndim))
            )
            return (
                dx.astype(x.data.dtype),
                dgamma.astype(gamma.data.dtype),
                dbeta.astype(beta.data.dtype),
            )

    else:

        def vjp(g):
            g64_up = g.astype(np.float64)
            dbeta = g64_up.sum(axis=axes)
            dgamma = (g64_up * xhat).sum(axis=axes)
            dx = g64_up * _bn_expand(g64 * inv_std, ndim)
            return (
                dx.astype(x.data.dtype),
                dgamma.astype(gamma.data.dtype),
                dbeta.astype(beta.data.dtype),
            )

    return Tensor.from_op(out, (x, gamma, beta), vjp, op="batchnorm")


# ---------------------------------------------------------------------------
# architecture spec
# ---------------------------------------------------------------------------


@dataclass
class ConvSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    pad: int
    full_precision: bool = False


@dataclass
class LinearSpec:
    name: str
    in_features: int
    out_features: int
    full_precision: bool = False


@dataclass
class BatchNormSpec:
    name: str
    channels: int


@dataclass
class ActQuantSpec:
    name: str


@dataclass
class MaxPoolSpec:
    name: str
    kernel: int


@dataclass
class FlattenSpec:
    name: str


@dataclass
class ReluSpec:
    name: str


PARAMETRIC = (ConvSpec, LinearSpec)


@dataclass
class ArchSpec:
    input_shape: tuple[int, int, int]
    layers: list = field(default_factory=list)

    def parametric(self) -> list:
        return [l for l in self.layers if isinstance(l, PARAMETRIC)]

    def batchnorms(self) -> list[BatchNormSpec]:
        return [l for l in self.layers if isinstance(l, BatchNormSpec)]

    def layer(self, name: str):
        for l in self.layers:
            if l.name == name:
                return l
        raise ConfigError(f"no layer named {name!r} in architecture")

    def to_text(self) -> str:
        lines = ["input {} {} {}".format(*self.input_shape)]
        for l in self.layers:
            if isinstance(l, ConvSpec):
                lines.append(f"conv {l.out_channels} {l.kernel} {l.stride} {l.pad}")
            elif isinstance(l, LinearSpec):
                lines.append(f"linear {l.out_features}")
            elif isinstance(l, BatchNormSpec):
                lines.append("batchnorm")
            elif isinstance(l, ActQuantSpec):
                lines.append("actquant")
            elif isinstance(l, MaxPoolSpec):
                lines.append(f"maxpool {l.kernel}")
            elif isinstance(l, FlattenSpec):
                lines.append("flatten")
            elif isinstance(l, ReluSpec):
                lines.append("relu")
        return "\n".join(lines) + "\n"


def parse_architecture(text: str) -> ArchSpec:
    """Parse the plain-text layer list, inferring channel counts and flags.

    Shapes are tracked line by line; the first and last parametric layers
    are flagged full-precision. Quantized parametric layers must see
    code-grid inputs, i.e. be reachable from an actquant site through
    pooling/flatten only.
    """
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith("input"):
        raise ConfigError("architecture must start with 'input C H W'")

    def ints(parts, n, what):
        if len(parts) != n:
            raise ConfigError(f"bad {what} line: expected {n} fields, got {parts}")
        try:
            return [int(p) for p in parts]
        except ValueError as e:
            raise ConfigError(f"bad {what} line: {e}") from None

    c, h, w = ints(lines[0].split()[1:], 3, "input")
    arch = ArchSpec(input_shape=(c, h, w))
    counts: dict[str, int] = {}

    def nm(kind):
        counts[kind] = counts.get(kind, 0) + 1
        return f"{kind}{counts[kind]}"

    shape: tuple = (c, h, w)  # (C,H,W) until flattened, then (D,)
    on_code_grid = False  # whether current activations are quantizer output

    for ln in lines[1:]:
        parts = ln.split()
        kind, args = parts[0], parts[1:]
        if kind == "conv":
            if len(shape) != 3:
                raise ConfigError("conv after flatten is not supported")
            out_ch, k, stride, pad = ints(args, 4, "conv")
            spec = ConvSpec(nm("conv"), shape[0], out_ch, k, stride, pad)
            ho = (shape[1] + 2 * pad - k) // stride + 1
            wo = (shape[2] + 2 * pad - k) // stride + 1
            if (shape[1] + 2 * pad - k) % stride or (shape[2] + 2 * pad - k) % stride or ho < 1 or wo < 1:
                raise ConfigError(f"conv geometry not integral at {spec.name}")
            shape = (out_ch, ho, wo)
            spec.input_on_code_grid = on_code_grid
            arch.layers.append(spec)
            on_code_grid = False
        elif kind == "linear":
            (out_f,) = ints(args, 1, "linear")
            in_f = shape[0] if len(shape) == 1 else int(np.prod(shape))
            if len(shape) != 1:
                raise ConfigError(f"linear layer needs flattened input, got shape {shape}")
            spec = LinearSpec(nm("linear"), in_f, out_f)
            spec.input_on_code_grid = on_code_grid
            arch.layers.append(spec)
            shape = (out_f,)
            on_code_grid = False
        elif kind == "batchnorm":
            arch.layers.append(BatchNormSpec(nm("bn"), shape[0]))
            on_code_grid = False
        elif kind == "actquant":
            arch.layers.append(ActQuantSpec(nm("actq")))
            on_code_grid = True
        elif kind == "maxpool":
            (k,) = ints(args, 1, "maxpool")
            if len(shape) != 3 or shape[1] % k or shape[2] % k:
                raise ConfigError(f"maxpool {k} does not divide feature map {shape}")
            arch.layers.append(MaxPoolSpec(nm("pool"), k))
            shape = (shape[0], shape[1] // k, shape[2] // k)
            # max over codes stays on the code grid
        elif kind == "flatten":
            arch.layers.append(FlattenSpec(nm("flatten")))
            shape = (int(np.prod(shape)),)
        elif kind == "relu":
            arch.layers.append(ReluSpec(nm("relu")))
            on_code_grid = False
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")

    params = arch.parametric()
    if len(params) < 2:
        raise ConfigError("architecture needs at least two parametric layers")
    params[0].full_precision = True
    params[-1].full_precision = True
    for p in params:
        if not p.full_precision and not getattr(p, "input_on_code_grid", False):
            raise ConfigError(
                f"quantized layer {p.name} must consume quantized activations "
                f"(insert an actquant site before it)"
            )
    return arch


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class AnyPrecisionModel:
    """Layer graph + float master weights + BatchNorm bank per BN layer."""

    def __init__(self, arch: ArchSpec, candidate_bits, seed: int = 0):
        bits = list(candidate_bits)
        if sorted(set(bits)) != bits or not bits:
            raise ConfigError(f"candidate bits must be ascending and distinct, got {bits}")
        for b in bits:
            QuantScheme(b)  # validates range
        self.arch = arch
        self.candidate_bits = bits
        self.active_bits: int | None = None
        self.params: dict[str, Tensor] = {}
        self.banks: dict[str, BatchNormBank] = {}
        self._init_params(seed)
        self.select_bitwidth(bits[-1])

    def _init_params(self, seed: int):
        rng = np.random.default_rng(seed)
        for layer in self.arch.layers:
            if isinstance(layer, ConvSpec):
                fan_in = layer.in_channels * layer.kernel * layer.kernel
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                               size=(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
                self.params[f"{layer.name}.weight"] = Tensor(w.astype(np.float32), requires_grad=True)
                self.params[f"{layer.name}.bias"] = Tensor(
                    np.zeros(layer.out_channels, dtype=np.float32), requires_grad=True
                )
            elif isinstance(layer, LinearSpec):
                fan_in = layer.in_features
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.in_features, layer.out_features))
                self.params[f"{layer.name}.weight"] = Tensor(w.astype(np.float32), requires_grad=True)
                self.params[f"{layer.name}.bias"] = Tensor(
                    np.zeros(layer.out_features, dtype=np.float32), requires_grad=True
                )
            elif isinstance(layer, BatchNormSpec):
                bank = BatchNormBank(layer.channels)
                for b in self.candidate_bits:
                    bank.add(b)
                self.banks[layer.name] = bank

    # -- bit-width control ----------------------------------------------

    def available_bits(self) -> list[int]:
        if not self.banks:
            return sorted(self.candidate_bits)
        common = None
        for bank in self.banks.values():
            s = set(bank.states)
            common = s if common is None else (common & s)
        return sorted(common)

    def select_bitwidth(self, n: int) -> "AnyPrecisionModel":
        """Bind all quantizers and BatchNorm layers to bit-width n. Idempotent."""
        QuantScheme(n)
        for bank in self.banks.values():
            if n not in bank:
                raise PrecisionUnavailableError(n, bank.states.keys())
        self.active_bits = n
        return self

    # -- forward ----------------------------------------------------------

    def forward(self, x, training: bool = False, taps: dict | None = None,
                quant_cache: dict | None = None) -> Tensor:
        """Run the network at the active bit-width; returns raw logits.

        ``taps``, when given, is filled with each layer's output array
        (and ``"<actq>.codes"`` for quantizer sites). ``quant_cache`` may
        be shared across forwards while the masters are frozen.
        """
        if self.active_bits is None:
            raise PrecisionUnavailableError("<unset>", [])
        scheme = QuantScheme(self.active_bits)
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.arch.layers:
            if isinstance(layer, ConvSpec):
                w = self.params[f"{layer.name}.weight"]
                if not (layer.full_precision or scheme.is_full_precision):
                    w = weight_quantize_ste(w, scheme, cache=quant_cache)
                h = conv2d(h, w, stride=layer.stride, pad=layer.pad)
                h = bias_add(h, self.params[f"{layer.name}.bias"])
            elif isinstance(layer, LinearSpec):
                w = self.params[f"{layer.name}.weight"]
                if not (layer.full_precision or scheme.is_full_precision):
                    w = weight_quantize_ste(w, scheme, cache=quant_cache)
                h = matmul(h, w)
                h = bias_add(h, self.params[f"{layer.name}.bias"])
            elif isinstance(layer, BatchNormSpec):
                state = self.banks[layer.name].get(self.active_bits)
                h = batchnorm_forward(h, state, training=training)
            elif isinstance(layer, ActQuantSpec):
                if scheme.is_full_precision:
                    # full-precision bypass: the site acts as the plain nonlinearity
                    h = relu(h)
                else:
                    h, codes = act_quantize_ste(h, scheme)
                    if taps is not None:
                        taps[f"{layer.name}.codes"] = codes
            elif isinstance(layer, MaxPoolSpec):
                h = maxpool2d(h, layer.kernel)
            elif isinstance(layer, FlattenSpec):
                h = reshape(h, (h.shape[0], -1))
            elif isinstance(layer, ReluSpec):
                h = relu(h)
            if taps is not None:
                taps[layer.name] = h.data
        return h

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors: masters, biases, and every bank's gamma/beta."""
        out = dict(self.params)
        for bn_name, bank in self.banks.items():
            for bits, st in sorted(bank.states.items()):
                out[f"{bn_name}.{bits}.gamma"] = st.gamma
                out[f"{bn_name}.{bits}.beta"] = st.beta
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.params.items()}
        for bn_name, bank in self.banks.items():
            for bits, st in sorted(bank.states.items()):
                p = f"{bn_name}.{bits}"
                out[f"{p}.gamma"] = st.gamma.data.copy()
                out[f"{p}.beta"] = st.beta.data.copy()
                out[f"{p}.running_mean"] = st.running_mean.copy()
                out[f"{p}.running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data = state[name].copy()
        for bn_name, bank in self.banks.items():
            parts = [k.split(".") for k in state]
            bits_present = sorted(
                int(p[1]) for p in parts if len(p) == 3 and p[0] == bn_name and p[2] == "gamma"
            )
            for bits in bits_present:
                p = f"{bn_name}.{bits}"
                st = bank.states.get(bits)
                if st is None:
                    st = bank.add(bits)
                st.gamma.data = state[f"{p}.gamma"].copy()
                st.beta.data = state[f"{p}.beta"].copy()
                st.running_mean = state[f"{p}.running_mean"].copy()
                st.running_var = state[f"{p}.running_var"].copy()

    def clone(self) -> "AnyPrecisionModel":
        other = AnyPrecisionModel(self.arch, self.candidate_bits, seed=0)
        other.load_state_dict(self.state_dict())
        if self.active_bits in other.available_bits():
            other.select_bitwidth(self.active_bits)
        return other

    def num_parameters(self, include_bn_stats: bool = True) -> int:
        n = sum(t.data.size for t in self.params.values())
        for bank in self.banks.values():
            per_state = bank.channels * (4 if include_bn_stats else 2)
            n += per_state * len(bank.states)
        return n


def init_model(arch, candidate_bits, seed: int = 0) -> AnyPrecisionModel:
    """He-initialized model; deterministic given the seed."""
    if isinstance(arch, str):
        arch = parse_architecture(arch)
    return AnyPrecisionModel(arch, candidate_bits, seed=seed)


def model_forward(model: AnyPrecisionModel, x, training: bool = False, taps=None) -> Tensor:
    return model.forward(x, training=training, taps=taps)
