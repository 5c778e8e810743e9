"""Command-line driver: train / eval / quantize / calibrate / uca / attack /
histogram.

Every run is deterministic given the config seed; --seed overrides it.
Exit code 0 on success, nonzero with a diagnostic on stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_dataset_pair
from .errors import AnyPrecError, UsageError
from .inference import load_model, save_model
from .metrics import write_metrics
from .network import init_model
from .training import evaluate, train


def _parse_bits(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(",", " ").split()]


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    import os

    if override:
        return Path(override)
    env = os.environ.get("ANYPREC_OUT_DIR")
    if env:
        return Path(env)
    return cfg.resolve(cfg.output_dir)


def _load_eval_data(args, meta=None):
    """Dataset for eval-style commands: --config wins, else the config
    embedded in the checkpoint."""
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_file(args.config)
    elif meta and meta.get("config"):
        cfg = ExperimentConfig.from_text(meta["config"])
        if getattr(args, "config_base", None):
            cfg.base_dir = Path(args.config_base)
    else:
        raise UsageError("no dataset source: pass --config or use a checkpoint "
                         "that embeds one")
    train_ds, test_ds = load_dataset_pair(cfg)
    return cfg, train_ds, (test_ds if test_ds is not None else train_ds)


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = _out_dir(cfg, args.out)
    train_ds, test_ds = load_dataset_pair(cfg)
    model = init_model(cfg.arch_text, cfg.train.candidate_bits, seed=cfg.train.seed)
    result = train(model, train_ds, cfg.train, eval_dataset=test_ds)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.npz", config_text=cfg.to_text())
    save_model(model, out / "model.apdnn")
    write_metrics(result.history, out, seed=cfg.train.seed, config_text=cfg.to_text())
    split = "test" if test_ds is not None else "train"
    print(f"wrote {out}/checkpoint.npz, model.apdnn, metrics.csv, summary.json")
    for bit in cfg.train.candidate_bits:
        print(f"bit {bit:>2}: final {split} accuracy "
              f"{result.final_accuracy(bit, split):.4f}")
    return 0


def cmd_eval(args) -> int:
    bits = _parse_bits(args.bits)
    path = Path(args.model)
    rows = []
    if path.suffix == ".apdnn":
        _, _, data = _load_eval_data(args)
        for n in bits:
            m = load_model(path, n)
            logits = m.infer(data.images)
            acc = float((logits.argmax(axis=1) == data.labels).mean())
            rows.append((n, acc, float("nan")))
    else:
        model, meta = load_checkpoint(path)
        _, _, data = _load_eval_data(args, meta)
        results = evaluate(model, data.images, data.labels, bits,
                           batch_size=args.batch_size)
        rows = [(n, results[n][1], results[n][0]) for n in bits]
    print("bit,accuracy,loss")
    for n, acc, loss in rows:
        print(f"{n},{acc!r},{loss!r}")
    if args.out:
        Path(args.out).write_text(
            "bit,accuracy,loss\n" + "".join(f"{n},{acc!r},{loss!r}\n" for n, acc, loss in rows)
        )
    return 0


def cmd_quantize(args) -> int:
    from .errors import PrecisionUnavailableError

    model, meta = load_checkpoint(args.model)
    bits = _parse_bits(args.bits) if args.bits else model.available_bits()
    available = model.available_bits()
    for b in bits:
        if b not in available:
            raise PrecisionUnavailableError(b, available)
    out = Path(args.out or (Path(args.model).parent / "model.apdnn"))
    packed = save_model(model, out)
    size = out.stat().st_size
    print(f"packed {out} ({size} bytes, bits {packed.bits})")
    return 0


def cmd_calibrate(args) -> int:
    model, meta = load_checkpoint(args.model)
    _, train_ds, _ = _load_eval_data(args, meta)
    for n in _parse_bits(args.bits):
        diag.bn_calibrate(model, n, train_ds, num_batches=args.batches)
        print(f"calibrated BatchNorm state for bit {n} over {args.batches} batches")
    out = Path(args.out or args.model)
    save_checkpoint(model, out, config_text=meta.get("config"))
    print(f"wrote {out}")
    return 0


def cmd_uca(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    train_ds, _ = load_dataset_pair(cfg)
    model = init_model(cfg.arch_text, cfg.train.candidate_bits, seed=cfg.train.seed)
    traces = diag.record_gradient_traces(model, train_ds, cfg.train.candidate_bits,
                                         steps=args.steps, config=cfg.train)
    matrix = diag.uca_matrix(traces)
    payload = {
        "steps": args.steps,
        "bits": sorted(matrix),
        "uca": {str(a): {str(b): matrix[a][b] for b in sorted(matrix[a])} for a in sorted(matrix)},
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_attack(args) -> int:
    model, meta = load_checkpoint(args.model)
    _, _, data = _load_eval_data(args, meta)
    bits = _parse_bits(args.bits)
    result = diag.cross_bit_robustness(model, data, args.eps, bits,
                                       sample_limit=args.limit)
    text = json.dumps(result.to_json_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_histogram(args) -> int:
    model, meta = load_checkpoint(args.model)
    _, _, data = _load_eval_data(args, meta)
    sites = [s.strip() for s in args.sites.split(",") if s.strip()]
    bits = _parse_bits(args.bits)
    report = diag.activation_histogram(model, data, bits, sites)
    lines = [",".join(str(v) for v in row) for row in report.to_csv_rows()]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anyprec",
                                description="any-precision network trainer and runtime")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--out", default=None, help="output directory override")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="accuracy per bit-width")
    e.add_argument("model", help="checkpoint .npz or packed .apdnn")
    e.add_argument("--bits", required=True)
    e.add_argument("--config", default=None, help="dataset config override")
    e.add_argument("--batch-size", type=int, default=256)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    q = sub.add_parser("quantize", help="pack a checkpoint for deployment")
    q.add_argument("model", help="checkpoint .npz")
    q.add_argument("--bits", default=None, help="bit-widths the deployment must serve")
    q.add_argument("--out", default=None)
    q.set_defaults(fn=cmd_quantize)

    c = sub.add_parser("calibrate", help="add BatchNorm states for untrained bits")
    c.add_argument("model", help="checkpoint .npz")
    c.add_argument("--bits", required=True)
    c.add_argument("--config", default=None, help="dataset config (defaults to embedded)")
    c.add_argument("--batches", type=int, default=100)
    c.add_argument("--out", default=None)
    c.set_defaults(fn=cmd_calibrate)

    u = sub.add_parser("uca", help="gradient cosine-consistency matrix")
    u.add_argument("config")
    u.add_argument("--steps", type=int, default=50)
    u.add_argument("--seed", type=int, default=None)
    u.add_argument("--out", default=None)
    u.set_defaults(fn=cmd_uca)

    a = sub.add_parser("attack", help="FGSM cross-bit robustness matrix")
    a.add_argument("model", help="checkpoint .npz")
    a.add_argument("--eps", type=float, default=0.007)
    a.add_argument("--bits", required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--limit", type=int, default=None, help="cap evaluation samples")
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_attack)

    h = sub.add_parser("histogram", help="activation histograms at probe sites")
    h.add_argument("model", help="checkpoint .npz")
    h.add_argument("--sites", required=True, help="comma-separated layer names")
    h.add_argument("--bits", required=True)
    h.add_argument("--config", default=None)
    h.add_argument("--out", default=None)
    h.set_defaults(fn=cmd_histogram)

    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except AnyPrecError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
