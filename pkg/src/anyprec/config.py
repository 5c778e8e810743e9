"""Plain-text experiment configs: key-value lines under [section] headers.

Repeated keys (the architecture's ``layer =`` lines) form ordered lists.
``parse -> serialize -> parse`` is a fixpoint; serialized output is
canonical and diffable. Golden configs live in the repo's configs/ dir.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .network import parse_architecture
from .quantize import FULL_PRECISION
from .training import TrainConfig

_SECTION_ORDER = ("architecture", "training", "data", "evaluation", "output")


def parse_sections(text: str) -> dict[str, list[tuple[str, str]]]:
    sections: dict[str, list[tuple[str, str]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, [])
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        sections[current].append((key, value))
    return sections


def _one(section, pairs, key, default=None, required=False):
    values = [v for k, v in pairs if k == key]
    if not values:
        if required:
            raise ConfigError(f"[{section}] is missing required key {key!r}")
        return default
    if len(values) > 1:
        raise ConfigError(f"[{section}] repeats key {key!r}")
    return values[0]


def _int_list(value: str) -> list[int]:
    return [int(tok) for tok in value.replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    """Everything one run needs: architecture, training, data, outputs."""

    arch_text: str
    train: TrainConfig
    data_source: str                      # "idx" | "synthetic"
    data_params: dict = field(default_factory=dict)
    eval_bits: list[int] = field(default_factory=list)
    output_dir: str = "runs/out"
    base_dir: Path | None = None          # directory config paths resolve against

    def __post_init__(self):
        parse_architecture(self.arch_text)  # fail fast on malformed arch
        allowed = set(range(1, 9)) | {FULL_PRECISION}
        for b in self.eval_bits:
            if b not in allowed:
                raise ConfigError(
                    f"evaluation bit {b} outside trainable/calibratable range 1..8 or {FULL_PRECISION}"
                )
        if self.data_source not in ("idx", "synthetic"):
            raise ConfigError(f"unknown data source {self.data_source!r}")

    def resolve(self, path_str: str) -> Path:
        p = Path(path_str)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def to_text(self) -> str:
        lines = ["[architecture]"]
        arch_lines = [ln for ln in self.arch_text.splitlines() if ln.strip()]
        lines.append(f"input = {arch_lines[0].split(None, 1)[1]}")
        for ln in arch_lines[1:]:
            lines.append(f"layer = {ln}")
        t = self.train
        lines += [
            "",
            "[training]",
            f"bits = {' '.join(str(b) for b in t.candidate_bits)}",
            f"epochs = {t.epochs}",
            f"batch_size = {t.batch_size}",
            f"optimizer = {t.optimizer}",
            f"base_lr = {t.base_lr!r}",
            f"lr_decay_epochs = {' '.join(str(e) for e in t.lr_decay_epochs)}",
            f"lr_decay_factor = {t.lr_decay_factor!r}",
            f"kd_mode = {t.kd_mode}",
            f"kd_temperature = {t.kd_temperature!r}",
            f"seed = {t.seed}",
            "",
            "[data]",
            f"source = {self.data_source}",
        ]
        for key in sorted(self.data_params):
            lines.append(f"{key} = {self.data_params[key]}")
        lines += [
            "",
            "[evaluation]",
            f"bits = {' '.join(str(b) for b in self.eval_bits)}",
            "",
            "[output]",
            f"dir = {self.output_dir}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base_dir: Path | None = None) -> "ExperimentConfig":
        sections = parse_sections(text)
        for name in sections:
            if name not in _SECTION_ORDER:
                raise ConfigError(f"unknown section [{name}]")
        arch_pairs = sections.get("architecture", [])
        input_line = _one("architecture", arch_pairs, "input", required=True)
        arch_lines = [f"input {input_line}"]
        arch_lines += [v for k, v in arch_pairs if k == "layer"]
        arch_text = "\n".join(arch_lines) + "\n"

        tr = sections.get("training", [])
        train = TrainConfig(
            candidate_bits=_int_list(_one("training", tr, "bits", required=True)),
            epochs=int(_one("training", tr, "epochs", "10")),
            batch_size=int(_one("training", tr, "batch_size", "64")),
            optimizer=_one("training", tr, "optimizer", "adam"),
            base_lr=float(_one("training", tr, "base_lr", "0.001")),
            lr_decay_epochs=_int_list(_one("training", tr, "lr_decay_epochs", "") or ""),
            lr_decay_factor=float(_one("training", tr, "lr_decay_factor", "0.1")),
            kd_mode=_one("training", tr, "kd_mode", "recursive"),
            kd_temperature=float(_one("training", tr, "kd_temperature", "1.0")),
            seed=int(_one("training", tr, "seed", "0")),
        )

        da = sections.get("data", [])
        source = _one("data", da, "source", required=True)
        data_params = {k: v for k, v in da if k != "source"}

        ev = sections.get("evaluation", [])
        eval_bits = _int_list(_one("evaluation", ev, "bits", "") or "") or list(train.candidate_bits)

        ou = sections.get("output", [])
        output_dir = _one("output", ou, "dir", "runs/out")

        return cls(arch_text=arch_text, train=train, data_source=source,
                   data_params=data_params, eval_bits=eval_bits,
                   output_dir=output_dir, base_dir=base_dir)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = cls.from_text(text, base_dir=path.parent)
        if cfg.data_source == "idx":
            for key in ("train_images", "train_labels"):
                if key not in cfg.data_params:
                    raise ConfigError(f"[data] source=idx requires {key}")
                p = cfg.resolve(cfg.data_params[key])
                if not p.exists():
                    raise ConfigError(f"[data] {key} file does not exist: {p}")
        return cfg


def load_dataset_pair(cfg: ExperimentConfig):
    """Materialize (train, test) datasets described by a config."""
    from .data import load_idx, synth_dataset

    if cfg.data_source == "idx":
        train = load_idx(cfg.resolve(cfg.data_params["train_images"]),
                         cfg.resolve(cfg.data_params["train_labels"]), split="train")
        test = None
        if "test_images" in cfg.data_params:
            test = load_idx(cfg.resolve(cfg.data_params["test_images"]),
                            cfg.resolve(cfg.data_params["test_labels"]), split="test")
        return train, test

    kind = cfg.data_params.get("kind", "two_gaussians")
    n = int(cfg.data_params.get("n", "512"))
    dim = int(cfg.data_params.get("dim", "8"))
    margin = float(cfg.data_params.get("margin", "3.0"))
    seed = int(cfg.data_params.get("seed", str(cfg.train.seed + 1000)))
    train = synth_dataset(kind, n, seed=seed, dim=dim, margin=margin, split="train")
    n_test = int(cfg.data_params.get("n_test", str(max(2, n // 4))))
    test = synth_dataset(kind, n_test, seed=seed + 1, dim=dim, margin=margin, split="test")
    return train, test
