"""Joint multi-bit training: the per-step bit loop, recursive distillation,
optimizers, and the epoch driver.

Each step iterates the candidate bit-widths from highest to lowest. The
highest branch is supervised by ground truth; with recursive distillation
every other branch matches the softened, detached predictions of the
nearest higher bit-width. Gradients accumulate on the shared master
weights across branches (equal to backpropagating the summed loss) and a
single optimizer update closes the step. BatchNorm running statistics for
bit n move only during bit n's forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, UsageError
from .network import AnyPrecisionModel
from .quantize import FULL_PRECISION
from .tensor import Tensor, kl_divergence, softmax_cross_entropy


@dataclass
class TrainConfig:
    candidate_bits: list[int] = field(default_factory=lambda: [1, 2, 4, 8, FULL_PRECISION])
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    base_lr: float = 1e-3
    lr_decay_epochs: list[int] = field(default_factory=list)
    lr_decay_factor: float = 0.1
    kd_mode: str = "recursive"
    kd_temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        bits = list(self.candidate_bits)
        if bits != sorted(set(bits)):
            raise ConfigError(f"candidate_bits must be ascending and distinct: {bits}")
        if list(self.lr_decay_epochs) != sorted(set(self.lr_decay_epochs)):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing: {self.lr_decay_epochs}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.kd_mode not in ("off", "recursive"):
            raise ConfigError(f"unknown kd_mode {self.kd_mode!r}")


@dataclass
class LossRecord:
    step: int
    per_bit: dict[int, float]

    @property
    def total(self) -> float:
        return float(sum(self.per_bit.values()))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class OptimizerState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, kind: str, params: dict[str, Tensor]):
        self.kind = kind
        self.t = 0
        self.lr = 0.0
        self.slots: dict[str, dict[str, np.ndarray]] = {}
        for name, p in params.items():
            if kind == "adam":
                self.slots[name] = {
                    "m": np.zeros_like(p.data),
                    "v": np.zeros_like(p.data),
                }
            else:
                self.slots[name] = {"vel": np.zeros_like(p.data)}


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: OptimizerState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    """Standard Adam, no weight decay. Mutates params in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        slot = state.slots[name]
        slot["m"] = beta1 * slot["m"] + (1 - beta1) * g
        slot["v"] = beta2 * slot["v"] + (1 - beta2) * (g * g)
        mhat = slot["m"] / (1 - beta1**t)
        vhat = slot["v"] / (1 - beta2**t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return state


def sgd_momentum_update(params, grads, state: OptimizerState, lr: float,
                        momentum: float = 0.9) -> OptimizerState:
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        slot = state.slots[name]
        slot["vel"] = momentum * slot["vel"] + g
        p -= (lr * slot["vel"]).astype(p.dtype)
    return state


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """base_lr times decay_factor per boundary passed; boundaries are closed."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    n = sum(1 for d in config.lr_decay_epochs if epoch >= d)
    return config.base_lr * config.lr_decay_factor**n


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _softmax64(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def recursive_kd_losses(per_bit_logits: dict[int, Tensor], labels,
                        temperature: float = 1.0) -> dict[int, Tensor]:
    """Highest bit: cross-entropy vs labels. Every other bit: KL against the
    softened, detached predictions of the nearest superior bit."""
    bits = sorted(per_bit_logits, reverse=True)
    if not bits:
        raise UsageError("per_bit_logits is empty")
    losses: dict[int, Tensor] = {}
    losses[bits[0]] = softmax_cross_entropy(per_bit_logits[bits[0]], labels)
    for prev, n in zip(bits, bits[1:]):
        teacher = _softmax64(per_bit_logits[prev].data, temperature)
        losses[n] = kl_divergence(per_bit_logits[n], teacher, temperature)
    return losses


# ---------------------------------------------------------------------------
# the step and the loop
# ---------------------------------------------------------------------------


def train_step(model: AnyPrecisionModel, batch, config: TrainConfig,
               opt_state: OptimizerState, grad_observer=None) -> LossRecord:
    """One joint step over all candidate bits plus one optimizer update.

    ``grad_observer(bits, {param_name: grad})``, when given, receives each
    branch's own master-gradient contribution before the update.
    """
    x, y = batch
    if model.candidate_bits != sorted(config.candidate_bits):
        raise UsageError("model and config disagree on candidate bits")
    params = model.parameters()
    model.zero_grad()
    prev_grads: dict[str, np.ndarray] | None = {} if grad_observer else None

    per_bit: dict[int, float] = {}
    teacher_logits: np.ndarray | None = None
    quant_cache: dict = {}  # masters are frozen until the update below
    for n in sorted(config.candidate_bits, reverse=True):
        model.select_bitwidth(n)
        logits = model.forward(x, training=True, quant_cache=quant_cache)
        if config.kd_mode == "recursive" and teacher_logits is not None:
            targets = _softmax64(teacher_logits, config.kd_temperature)
            loss = kl_divergence(logits, targets, config.kd_temperature)
        else:
            loss = softmax_cross_entropy(logits, y)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(opt_state.t, f"non-finite loss at bit {n}")
        loss.backward()
        per_bit[n] = value
        teacher_logits = logits.data.copy()
        if grad_observer is not None:
            branch = {}
            for name, p in params.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                branch[name] = g - prev_grads.get(name, 0.0)
                prev_grads[name] = g.copy()
            grad_observer(n, branch)

    data = {name: p.data for name, p in params.items()}
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    if config.optimizer == "adam":
        adam_update(data, grads, opt_state, opt_state.lr)
    else:
        sgd_momentum_update(data, grads, opt_state, opt_state.lr)
    return LossRecord(step=opt_state.t, per_bit=per_bit)


def iterate_minibatches(images: np.ndarray, labels: np.ndarray, batch_size: int,
                        rng: np.random.Generator | None = None):
    """Seeded shuffle when rng is given; batches of size < 2 are dropped."""
    n = images.shape[0]
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.size < 2:
            continue
        yield images[idx], labels[idx]


def evaluate(model: AnyPrecisionModel, images: np.ndarray, labels: np.ndarray,
             bits, batch_size: int = 256) -> dict[int, tuple[float, float]]:
    """Eval-mode loss and accuracy per bit-width."""
    prior = model.active_bits
    out: dict[int, tuple[float, float]] = {}
    quant_cache: dict = {}  # weights are frozen throughout evaluation
    for n in bits:
        model.select_bitwidth(n)
        losses = []
        correct = 0
        for start in range(0, images.shape[0], batch_size):
            xb = images[start:start + batch_size]
            yb = labels[start:start + batch_size]
            logits = model.forward(xb, training=False, quant_cache=quant_cache)
            loss = softmax_cross_entropy(logits, yb)
            losses.append(loss.item() * xb.shape[0])
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        out[n] = (float(np.sum(losses) / images.shape[0]), correct / images.shape[0])
    if prior is not None:
        model.select_bitwidth(prior)
    return out


@dataclass
class MetricRow:
    epoch: int
    bit: int
    split: str
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    model: AnyPrecisionModel
    best_state: dict
    best_epoch: int
    history: list[MetricRow]

    def final_accuracy(self, bit: int, split: str = "test") -> float:
        rows = [r for r in self.history if r.bit == bit and r.split == split]
        if not rows:
            raise UsageError(f"no history rows for bit {bit} split {split!r}")
        return rows[-1].accuracy


def train(model: AnyPrecisionModel, dataset, config: TrainConfig,
          eval_dataset=None, train_eval_cap: int = 2048,
          grad_observer=None, max_steps: int | None = None) -> TrainResult:
    """Epochs of seeded shuffled mini-batches with per-epoch evaluation at
    every candidate bit. Returns the final model plus the
    best-by-mean-accuracy snapshot.

    The train-split evaluation uses at most ``train_eval_cap`` samples
    (fixed prefix) to keep epochs cheap; the eval split is used in full.
    """
    rng = np.random.default_rng(config.seed)
    opt_state = OptimizerState(config.optimizer, model.parameters())
    history: list[MetricRow] = []
    best_acc, best_state, best_epoch = -1.0, model.state_dict(), -1
    last_good = best_state
    steps = 0

    for epoch in range(config.epochs):
        opt_state.lr = lr_schedule(epoch, config)
        for batch in iterate_minibatches(dataset.images, dataset.labels, config.batch_size, rng):
            try:
                train_step(model, batch, config, opt_state, grad_observer=grad_observer)
            except DivergenceError as err:
                err.snapshot = last_good
                raise
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        splits = [("train", dataset.images[:train_eval_cap], dataset.labels[:train_eval_cap])]
        if eval_dataset is not None:
            splits.append(("test", eval_dataset.images, eval_dataset.labels))
        mean_acc_split = splits[-1][0]
        mean_acc = 0.0
        for split, imgs, labs in splits:
            results = evaluate(model, imgs, labs, config.candidate_bits,
                               batch_size=config.batch_size)
            for n in config.candidate_bits:
                loss, acc = results[n]
                history.append(MetricRow(epoch, n, split, loss, acc))
                if split == mean_acc_split:
                    mean_acc += acc / len(config.candidate_bits)
        last_good = model.state_dict()
        if mean_acc > best_acc:
            best_acc, best_state, best_epoch = mean_acc, last_good, epoch
        if max_steps is not None and steps >= max_steps:
            break
    return TrainResult(model=model, best_state=best_state, best_epoch=best_epoch, history=history)
