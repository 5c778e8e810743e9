"""Training checkpoints: float master weights plus banks, npz-backed.

Distinct from the packed deployment format: a checkpoint keeps the
full-precision masters so training can resume; the packed file keeps
8-bit codes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .network import AnyPrecisionModel, init_model

CKPT_FORMAT = "anyprec-checkpoint-v1"


def save_checkpoint(model: AnyPrecisionModel, path, config_text: str | None = None) -> Path:
    path = Path(path)
    meta = {
        "format": CKPT_FORMAT,
        "arch": model.arch.to_text(),
        "candidate_bits": model.candidate_bits,
        "available_bits": model.available_bits(),
        "config": config_text,
    }
    arrays = {f"state/{k}": v for k, v in model.state_dict().items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path) -> tuple[AnyPrecisionModel, dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            if "__meta__" not in z:
                raise FormatError(f"{path}: not a checkpoint (missing __meta__)")
            meta = json.loads(z["__meta__"].tobytes().decode())
            if meta.get("format") != CKPT_FORMAT:
                raise FormatError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
            state = {k[len("state/"):]: z[k] for k in z.files if k.startswith("state/")}
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: cannot read checkpoint: {e}") from e
    model = init_model(meta["arch"], meta["candidate_bits"], seed=0)
    model.load_state_dict(state)
    return model, meta
