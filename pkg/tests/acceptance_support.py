"""Shared machinery for the acceptance suite: desk-scale data selection,
cached training runs, and the pass/fail reporter.

Training results are cached under tests/_cache keyed by the exact config
and the package source, so re-running the suite does not retrain unless
code or configs changed. Set ANYPREC_TEST_CACHE=off to disable.

Set ANYPREC_MNIST_DIR to a directory holding the four MNIST IDX files to
run the desk-scale criteria on real MNIST instead of the bundled digits.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from anyprec.config import ExperimentConfig
from anyprec.data import Dataset, load_digits_bundle, load_idx
from anyprec.network import AnyPrecisionModel, init_model
from anyprec.training import MetricRow, TrainConfig, train

ROOT = Path(__file__).parent.parent
CACHE_DIR = Path(__file__).parent / "_cache"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'} - {detail}")


def info(criterion: int, detail: str) -> None:
    print(f"criterion {criterion:>2}: REPORT - {detail}")


def desk_data() -> tuple[Dataset, Dataset, str, str]:
    """(train, test, input-line, tag): real MNIST when supplied, else the
    bundled digits corpus."""
    mnist_dir = os.environ.get("ANYPREC_MNIST_DIR")
    if mnist_dir:
        d = Path(mnist_dir)
        train = load_idx(d / MNIST_FILES["train_images"], d / MNIST_FILES["train_labels"])
        test = load_idx(d / MNIST_FILES["test_images"], d / MNIST_FILES["test_labels"], split="test")
        return train, test, "input 1 28 28", "mnist"
    train, test = load_digits_bundle()
    return train, test, "input 1 8 8", "digits"


def base_config() -> ExperimentConfig:
    return ExperimentConfig.from_file(ROOT / "configs" / "digits_any.cfg")


def make_train_config(bits, seed: int, kd_mode: str) -> TrainConfig:
    base = base_config().train
    return TrainConfig(
        candidate_bits=list(bits),
        epochs=base.epochs,
        batch_size=base.batch_size,
        optimizer=base.optimizer,
        base_lr=base.base_lr,
        lr_decay_epochs=list(base.lr_decay_epochs),
        lr_decay_factor=base.lr_decay_factor,
        kd_mode=kd_mode,
        kd_temperature=base.kd_temperature,
        seed=seed,
    )


def _code_salt() -> str:
    # hash only the modules that shape training trajectories; run configs
    # are captured in each cache key via the TrainConfig fields
    h = hashlib.sha256()
    src = ROOT / "src" / "anyprec"
    for name in ("tensor.py", "quantize.py", "network.py", "training.py", "data.py"):
        h.update((src / name).read_bytes())
    return h.hexdigest()[:16]


@dataclass
class Run:
    model: AnyPrecisionModel
    history: list[MetricRow]
    seconds: float
    tag: str

    def final_test_accuracy(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for r in self.history:
            if r.split == "test":
                out[r.bit] = r.accuracy
        return out


def _cache_enabled() -> bool:
    return os.environ.get("ANYPREC_TEST_CACHE", "on") != "off"


def _canonical_cfg(cfg: TrainConfig) -> dict:
    fields = dict(vars(cfg))
    if fields.get("kd_mode") == "off":
        fields["kd_temperature"] = None  # inert without distillation
    return fields


def trained_run(arch_text: str, cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset,
                tag: str) -> Run:
    """Train (or load from the cache) one full run."""
    key_src = json.dumps({
        "arch": arch_text,
        "cfg": sorted(_canonical_cfg(cfg).items(), key=str),
        "salt": _code_salt(),
        "data": tag,
        "n": len(train_ds),
    }, default=str, sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:24]
    cache_file = CACHE_DIR / f"{tag}-{key}.npz"

    if _cache_enabled() and cache_file.exists():
        with np.load(cache_file, allow_pickle=False) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            state = {k[6:]: z[k] for k in z.files if k.startswith("state/")}
        model = init_model(arch_text, cfg.candidate_bits, seed=cfg.seed)
        model.load_state_dict(state)
        history = [MetricRow(**row) for row in meta["history"]]
        return Run(model=model, history=history, seconds=meta["seconds"], tag=tag)

    model = init_model(arch_text, cfg.candidate_bits, seed=cfg.seed)
    t0 = time.monotonic()
    result = train(model, train_ds, cfg, eval_dataset=test_ds)
    seconds = time.monotonic() - t0

    if _cache_enabled():
        CACHE_DIR.mkdir(exist_ok=True)
        meta = {
            "seconds": seconds,
            "history": [vars(r) for r in result.history],
        }
        arrays = {f"state/{k}": v for k, v in model.state_dict().items()}
        with open(cache_file, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                     **arrays)
    return Run(model=model, history=result.history, seconds=seconds, tag=tag)
