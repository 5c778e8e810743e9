"""Metrics persistence: per-epoch CSV plus a JSON summary.

Field order is fixed and floats are written with shortest-roundtrip repr,
so re-writing the same history is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import UsageError
from .training import MetricRow

CSV_HEADER = "epoch,bit,split,loss,accuracy"


def history_to_csv(history: list[MetricRow]) -> str:
    lines = [CSV_HEADER]
    for r in history:
        lines.append(f"{r.epoch},{r.bit},{r.split},{r.loss!r},{r.accuracy!r}")
    return "\n".join(lines) + "\n"


def summarize(history: list[MetricRow], seed: int, config_text: str | None = None,
              split: str = "test") -> dict:
    rows = [r for r in history if r.split == split]
    if not rows:
        rows = history
        split = rows[0].split
    per_bit: dict[str, dict] = {}
    for bit in sorted({r.bit for r in rows}):
        bit_rows = [r for r in rows if r.bit == bit]
        best = max(bit_rows, key=lambda r: r.accuracy)
        per_bit[str(bit)] = {
            "best_accuracy": best.accuracy,
            "best_epoch": best.epoch,
            "final_accuracy": bit_rows[-1].accuracy,
            "final_loss": bit_rows[-1].loss,
        }
    summary = {"seed": seed, "split": split, "per_bit": per_bit}
    if config_text is not None:
        summary["config"] = config_text
    return summary


def write_metrics(history: list[MetricRow], out_dir, seed: int = 0,
                  config_text: str | None = None) -> tuple[Path, Path]:
    """Write metrics.csv and summary.json; deterministic byte-for-byte."""
    if not history:
        raise UsageError("refusing to write metrics for an empty history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    json_path = out_dir / "summary.json"
    csv_path.write_text(history_to_csv(history))
    json_path.write_text(json.dumps(summarize(history, seed, config_text),
                                    indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
