"""Analysis procedures: gradient-consistency (UCA), BatchNorm calibration
for untrained bit-widths, activation histograms, and FGSM robustness.

All diagnostics are read-mostly; ``bn_calibrate`` mutates only the banks
and needs exclusive access to the model while it runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, UndefinedStatisticError, UsageError
from .network import AnyPrecisionModel, BatchNormState
from .tensor import Tensor, softmax_cross_entropy
from .training import OptimizerState, TrainConfig, evaluate, iterate_minibatches, train_step


# ---------------------------------------------------------------------------
# update compliance average (gradient cosine consistency)
# ---------------------------------------------------------------------------


@dataclass
class GradientTrace:
    """Per-layer, per-step gradient vectors recorded for one bit-width."""

    bits: int
    layer_names: list[str]
    steps: list[dict[str, np.ndarray]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def n_layers(self) -> int:
        return len(self.layer_names)


def uca(trace_a: GradientTrace, trace_b: GradientTrace) -> float:
    """Mean cosine similarity over all (layer, step) gradient pairs.

    Pairs where either gradient has zero norm are excluded, with the count
    adjusted accordingly.
    """
    if trace_a.n_steps != trace_b.n_steps or trace_a.layer_names != trace_b.layer_names:
        raise UsageError("gradient traces are not aligned (steps/layers differ)")
    total, count = 0.0, 0
    for sa, sb in zip(trace_a.steps, trace_b.steps):
        for name in trace_a.layer_names:
            ga = sa[name].astype(np.float64).ravel()
            gb = sb[name].astype(np.float64).ravel()
            na, nb = np.linalg.norm(ga), np.linalg.norm(gb)
            if na == 0.0 or nb == 0.0:
                continue
            total += float(ga @ gb) / (na * nb)
            count += 1
    if count == 0:
        raise UndefinedStatisticError("no (layer, step) pair has nonzero gradients")
    return total / count


def record_gradient_traces(model: AnyPrecisionModel, dataset, bits, steps: int,
                           config: TrainConfig | None = None) -> dict[int, GradientTrace]:
    """Run joint training for ``steps`` steps, capturing each bit's own
    master-weight gradient per parametric layer before the update.

    BatchNorm parameters and biases are excluded; only shared weight
    tensors enter the traces.
    """
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    bits = sorted(bits)
    if config is None:
        config = TrainConfig(candidate_bits=bits, epochs=1, batch_size=64, kd_mode="off")
    layer_names = [f"{s.name}.weight" for s in model.arch.parametric()]
    traces = {n: GradientTrace(bits=n, layer_names=layer_names) for n in bits}
    pending: dict[int, dict[str, np.ndarray]] = {}

    def observer(n, branch):
        pending[n] = {name: branch[name].astype(np.float32) for name in layer_names}

    rng = np.random.default_rng(config.seed)
    opt_state = OptimizerState(config.optimizer, model.parameters())
    opt_state.lr = config.base_lr
    done = 0
    while done < steps:
        for batch in iterate_minibatches(dataset.images, dataset.labels, config.batch_size, rng):
            pending.clear()
            train_step(model, batch, config, opt_state, grad_observer=observer)
            for n in bits:
                traces[n].steps.append(pending[n])
            done += 1
            if done >= steps:
                break
    return traces


def uca_matrix(traces: dict[int, GradientTrace]) -> dict[int, dict[int, float]]:
    bits = sorted(traces)
    return {a: {b: uca(traces[a], traces[b]) for b in bits} for a in bits}


# ---------------------------------------------------------------------------
# batchnorm calibration
# ---------------------------------------------------------------------------


def bn_calibrate(model: AnyPrecisionModel, n: int, data, num_batches: int = 100,
                 batch_size: int = 64) -> AnyPrecisionModel:
    """Register BatchNorm states for an untrained bit-width n.

    gamma/beta come from the nearest existing bit-width (ties toward the
    lower one); statistics are reset and re-estimated by forwarding
    ``num_batches`` batches at bit n with the usual running-average rule.
    No gradient flows and no other parameter changes.
    """
    if num_batches < 1:
        raise UsageError(f"num_batches must be >= 1, got {num_batches}")
    for bank in model.banks.values():
        if n in bank:
            raise UsageError(f"bit-width {n} already has a BatchNorm state")

    for bank in model.banks.values():
        existing = bank.bits()
        nearest = min(existing, key=lambda b: (abs(b - n), b))
        src = bank.states[nearest]
        bank.add(n, BatchNormState(
            gamma=Tensor(src.gamma.data.copy(), requires_grad=True),
            beta=Tensor(src.beta.data.copy(), requires_grad=True),
            running_mean=np.zeros(bank.channels, dtype=np.float32),
            running_var=np.ones(bank.channels, dtype=np.float32),
            decay=src.decay,
            epsilon=src.epsilon,
        ))

    prior = model.active_bits
    model.select_bitwidth(n)
    done = 0
    while done < num_batches:
        for xb, _ in iterate_minibatches(data.images, data.labels, batch_size):
            model.forward(xb, training=True)  # statistics update only
            done += 1
            if done >= num_batches:
                break
    if prior is not None:
        model.select_bitwidth(prior)
    return model


# ---------------------------------------------------------------------------
# activation histograms
# ---------------------------------------------------------------------------


@dataclass
class HistogramEntry:
    site: str
    bits: int
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    variance: float


@dataclass
class HistogramReport:
    entries: list[HistogramEntry] = field(default_factory=list)

    def get(self, site: str, bits: int) -> HistogramEntry:
        for e in self.entries:
            if e.site == site and e.bits == bits:
                return e
        raise UsageError(f"no histogram for site {site!r} at {bits} bits")

    def to_csv_rows(self):
        rows = [("site", "bit", "bin_lo", "bin_hi", "count")]
        for e in self.entries:
            for lo, hi, c in zip(e.edges[:-1], e.edges[1:], e.counts):
                rows.append((e.site, e.bits, repr(float(lo)), repr(float(hi)), int(c)))
        return rows


N_BINS = 64


def activation_histogram(model: AnyPrecisionModel, data, bits, probe_sites,
                         batch_size: int = 256, sample_limit: int | None = 4096) -> HistogramReport:
    """Collect activation distributions at named layers for each bit-width."""
    names = {l.name for l in model.arch.layers}
    for site in probe_sites:
        if site not in names:
            raise UsageError(f"unknown probe site {site!r}; valid sites: {sorted(names)}")
    images = data.images[:sample_limit] if sample_limit else data.images
    prior = model.active_bits
    report = HistogramReport()
    for n in bits:
        model.select_bitwidth(n)
        collected: dict[str, list[np.ndarray]] = {s: [] for s in probe_sites}
        for start in range(0, images.shape[0], batch_size):
            taps: dict = {}
            model.forward(images[start:start + batch_size], training=False, taps=taps)
            for s in probe_sites:
                collected[s].append(taps[s].ravel())
        for s in probe_sites:
            values = np.concatenate(collected[s]).astype(np.float64)
            lo, hi = float(values.min()), float(values.max())
            if hi == lo:
                edges = np.linspace(lo - 0.5, lo + 0.5, N_BINS + 1)
            else:
                edges = np.linspace(lo, hi, N_BINS + 1)
            counts, _ = np.histogram(values, bins=edges)
            report.entries.append(HistogramEntry(
                site=s, bits=n, edges=edges, counts=counts,
                mean=float(values.mean()), variance=float(values.var()),
            ))
    if prior is not None:
        model.select_bitwidth(prior)
    return report


# ---------------------------------------------------------------------------
# FGSM and cross-bit robustness
# ---------------------------------------------------------------------------


def fgsm_attack(model: AnyPrecisionModel, x: np.ndarray, labels, epsilon: float,
                attack_bits: int) -> np.ndarray:
    """x + eps * sign(dCE/dx) through the straight-through surrogate at
    ``attack_bits``, clipped back to the [0,1] input range.

    The perturbation respects the epsilon ball exactly, including float
    rounding at the clip boundaries.
    """
    if epsilon < 0:
        raise InputError(f"epsilon must be >= 0, got {epsilon}")
    prior = model.active_bits
    model.select_bitwidth(attack_bits)
    x32 = np.asarray(x, dtype=np.float32)
    x64 = x32.astype(np.float64)
    xt = Tensor(x32, requires_grad=True)
    loss = softmax_cross_entropy(model.forward(xt, training=False), labels)
    loss.backward()
    grad = xt.grad.astype(np.float64)
    adv = np.clip(x64 + epsilon * np.sign(grad), 0.0, 1.0).astype(np.float32)
    # float rounding at x + eps (and the float32 cast) can overshoot the
    # ball by one ulp; nudge offenders back until the bound holds exactly
    over = np.abs(adv.astype(np.float64) - x64) > epsilon
    while np.any(over):
        adv = np.where(over, np.nextafter(adv, x32), adv)
        over = np.abs(adv.astype(np.float64) - x64) > epsilon
    if prior is not None:
        model.select_bitwidth(prior)
    return adv


@dataclass
class RobustnessResult:
    epsilon: float
    bits: list[int]
    clean: dict[int, float]
    matrix: dict[int, dict[int, float]]  # attack bit -> defend bit -> accuracy

    def to_json_dict(self):
        return {
            "epsilon": self.epsilon,
            "bits": self.bits,
            "clean_accuracy": {str(k): v for k, v in sorted(self.clean.items())},
            "matrix": {
                str(a): {str(d): self.matrix[a][d] for d in sorted(self.matrix[a])}
                for a in sorted(self.matrix)
            },
        }


def _accuracy(model: AnyPrecisionModel, images, labels, bits, batch_size=512) -> float:
    return evaluate(model, images, labels, [bits], batch_size=batch_size)[bits][1]


def cross_bit_robustness(model: AnyPrecisionModel, data, epsilon: float, bits,
                         batch_size: int = 256, sample_limit: int | None = None) -> RobustnessResult:
    """Attack at each bit, defend at every bit; returns the accuracy matrix."""
    bits = sorted(bits)
    images = data.images[:sample_limit] if sample_limit else data.images
    labels = data.labels[:sample_limit] if sample_limit else data.labels
    clean = {d: _accuracy(model, images, labels, d, batch_size) for d in bits}
    matrix: dict[int, dict[int, float]] = {}
    for a in bits:
        adv_parts = []
        for start in range(0, images.shape[0], batch_size):
            adv_parts.append(fgsm_attack(model, images[start:start + batch_size],
                                         labels[start:start + batch_size], epsilon, a))
        adv = np.concatenate(adv_parts)
        matrix[a] = {d: _accuracy(model, adv, labels, d, batch_size) for d in bits}
    return RobustnessResult(epsilon=epsilon, bits=bits, clean=clean, matrix=matrix)
