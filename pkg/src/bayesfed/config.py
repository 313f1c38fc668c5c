"""Experiment configuration and its flat ``key = value`` text format.

Example::

    # desk-scale IID run
    rounds = 60
    aggregation = ws
    arch.layer_sizes = 2,16,3
    train.local_epochs = 1
    lr_schedule.eta0 = 0.1

Every key has a default, so a config file only lists what differs. Unknown
keys and unparsable values raise ``ConfigError`` naming the line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .aggregation import AggregationStrategy
from .bnn import Architecture, Mode, Prior, TrainConfig
from .errors import BayesFedError, ConfigError
from .weighting import WeightingScheme


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    parts = [p for p in re.split(r"[,\s]+", text.strip().strip("[]()")) if p]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("none", "off", "") else float(text)


def _opt_str(text: str) -> str | None:
    t = text.strip()
    return None if t.lower() in ("", "none") else t


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t
    return parse


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "rounds": (int, 60),
    "clients": (int, 10),
    "workers": (int, 1),
    "aggregation": (_choice(*(s.value for s in AggregationStrategy)), "nwa"),
    "weighting": (_choice(*(s.value for s in WeightingScheme)), "train_size"),
    "refresh_prior": (_bool, False),
    "partition": (_choice("iid", "two_class", "dirichlet"), "iid"),
    "partition.alpha": (float, 0.5),
    "arch.layer_sizes": (_int_list, (2, 16, 3)),
    "arch.mode": (_choice(*(m.value for m in Mode)), "vi"),
    "arch.activation": (_choice("relu"), "relu"),
    "prior.mean": (float, 0.0),
    "prior.variance": (float, 100.0),
    "train.local_epochs": (int, 1),
    "train.batch_size": (int, 32),
    "train.dropout_rate": (float, 0.2),
    "train.mc_samples": (int, 20),
    "train.grad_clip": (_opt_float, 10.0),
    "lr_schedule.eta0": (float, 0.001),
    "lr_schedule.silent_rounds": (int, 50),
    "lr_schedule.decay": (float, 0.04),
    "pretrain": (_bool, False),
    "pretrain.fraction": (float, 0.10),
    "pretrain.max_epochs": (int, 100),
    "pretrain.patience": (int, 10),
    "pretrain.val_fraction": (float, 0.2),
    "data.source": (_choice("blobs", "file"), "blobs"),
    "data.classes": (int, 3),
    "data.dim": (int, 2),
    "data.per_class": (int, 600),
    "data.test_per_class": (int, 200),
    "data.spread": (float, 0.3),
    "data.spacing": (float, 1.0),
    "data.train_path": (_opt_str, None),
    "data.test_path": (_opt_str, None),
    "data.header": (_bool, False),
}

DEFAULTS: dict[str, Any] = {k: v[1] for k, v in SCHEMA.items()}


def _parse_partition(value: str) -> tuple[str, float | None]:
    m = re.fullmatch(r"\s*dirichlet\s*\(\s*([^)]+)\)\s*", value, flags=re.IGNORECASE)
    if m:
        return "dirichlet", float(m.group(1))
    return value, None


def parse_value(key: str, text: str, line: int | None = None, source: str | None = None) -> dict[str, Any]:
    """Parse one ``key = text`` pair into a (possibly two-entry) flat mapping."""
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}", line, source)
    text = text.strip()
    try:
        if key == "partition":
            kind, alpha = _parse_partition(text)
            out: dict[str, Any] = {key: SCHEMA[key][0](kind)}
            if alpha is not None:
                out["partition.alpha"] = alpha
            return out
        return {key: SCHEMA[key][0](text)}
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {exc}", line, source) from None


def parse_text(text: str, source: str | None = None) -> dict[str, Any]:
    values: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = line.split("=", 1)
        key = key.strip()
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, source)
        seen[key] = lineno
        values.update(parse_value(key, value, lineno, source))
    return values


def parse_overrides(pairs: Iterable[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, pair in enumerate(pairs, start=1):
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value", n, "--set")
        key, value = pair.split("=", 1)
        out.update(parse_value(key, value, n, "--set"))
    return out


@dataclass(frozen=True)
class LRSchedule:
    eta0: float = 0.001
    silent_rounds: int = 50
    decay: float = 0.04


@dataclass(frozen=True)
class PretrainConfig:
    fraction: float = 0.10
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.2


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    alpha: float = 0.5


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    classes: int = 3
    dim: int = 2
    per_class: int = 600
    test_per_class: int = 200
    spread: float = 0.3
    spacing: float = 1.0
    train_path: str | None = None
    test_path: str | None = None
    header: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    rounds: int = 60
    clients: int = 10
    arch: Architecture = field(default_factory=lambda: Architecture((2, 16, 3)))
    prior: Prior = field(default_factory=Prior)
    train: TrainConfig = field(default_factory=TrainConfig)
    aggregation: AggregationStrategy = AggregationStrategy.NWA
    weighting: WeightingScheme = WeightingScheme.TRAIN_SIZE
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    lr_schedule: LRSchedule = field(default_factory=LRSchedule)
    refresh_prior: bool = False
    pretrain: PretrainConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        object.__setattr__(self, "aggregation", AggregationStrategy.parse(self.aggregation))
        object.__setattr__(self, "weighting", WeightingScheme.parse(self.weighting))
        if self.arch.mode is not Mode.VI:
            if self.aggregation is not AggregationStrategy.NWA:
                raise ConfigError(f"{self.arch.mode.value} models only support nwa aggregation")
            if self.weighting.needs_posterior:
                raise ConfigError(
                    f"{self.weighting.value} weighting needs a VI model; use equal or train_size")
        if self.weighting is WeightingScheme.MAX_DISCREPANCY and self.clients < 2:
            raise ConfigError("max_discrepancy weighting needs at least two clients")
        if self.partition.kind not in ("iid", "two_class", "dirichlet"):
            raise ConfigError(f"unknown partition {self.partition.kind!r}")
        if self.partition.kind == "dirichlet" and not self.partition.alpha > 0:
            raise ConfigError("partition.alpha must be positive")
        if self.data.source == "file" and not self.data.train_path:
            raise ConfigError("data.source = file needs data.train_path")

    @classmethod
    def from_flat(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        unknown = set(values) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
        v = {**DEFAULTS, **values}
        try:
            return cls(
                seed=v["seed"], rounds=v["rounds"], clients=v["clients"], workers=v["workers"],
                arch=Architecture(tuple(v["arch.layer_sizes"]), Mode(v["arch.mode"]),
                                  v["arch.activation"]),
                prior=Prior(float(v["prior.mean"]), float(v["prior.variance"])),
                train=TrainConfig(
                    local_epochs=v["train.local_epochs"], batch_size=v["train.batch_size"],
                    learning_rate=v["lr_schedule.eta0"], dropout_rate=v["train.dropout_rate"],
                    mc_samples=v["train.mc_samples"], seed=v["seed"],
                    grad_clip=v["train.grad_clip"]),
                aggregation=v["aggregation"], weighting=v["weighting"],
                partition=PartitionSpec(v["partition"], float(v["partition.alpha"])),
                lr_schedule=LRSchedule(float(v["lr_schedule.eta0"]), v["lr_schedule.silent_rounds"],
                                       float(v["lr_schedule.decay"])),
                refresh_prior=v["refresh_prior"],
                pretrain=PretrainConfig(float(v["pretrain.fraction"]), v["pretrain.max_epochs"],
                                        v["pretrain.patience"], float(v["pretrain.val_fraction"]))
                if v["pretrain"] else None,
                data=DataConfig(v["data.source"], v["data.classes"], v["data.dim"],
                                v["data.per_class"], v["data.test_per_class"],
                                float(v["data.spread"]), float(v["data.spacing"]),
                                v["data.train_path"], v["data.test_path"], v["data.header"]),
            )
        except ConfigError:
            raise
        except BayesFedError as exc:
            raise ConfigError(str(exc)) from None

    def to_flat(self) -> dict[str, Any]:
        pre = self.pretrain or PretrainConfig()
        return {
            "seed": self.seed, "rounds": self.rounds, "clients": self.clients,
            "workers": self.workers,
            "aggregation": self.aggregation.value, "weighting": self.weighting.value,
            "refresh_prior": self.refresh_prior,
            "partition": self.partition.kind, "partition.alpha": self.partition.alpha,
            "arch.layer_sizes": self.arch.layer_sizes, "arch.mode": self.arch.mode.value,
            "arch.activation": self.arch.activation,
            "prior.mean": float(self.prior.mean), "prior.variance": float(self.prior.variance),
            "train.local_epochs": self.train.local_epochs, "train.batch_size": self.train.batch_size,
            "train.dropout_rate": self.train.dropout_rate, "train.mc_samples": self.train.mc_samples,
            "train.grad_clip": self.train.grad_clip,
            "lr_schedule.eta0": self.lr_schedule.eta0,
            "lr_schedule.silent_rounds": self.lr_schedule.silent_rounds,
            "lr_schedule.decay": self.lr_schedule.decay,
            "pretrain": self.pretrain is not None, "pretrain.fraction": pre.fraction,
            "pretrain.max_epochs": pre.max_epochs, "pretrain.patience": pre.patience,
            "pretrain.val_fraction": pre.val_fraction,
            "data.source": self.data.source, "data.classes": self.data.classes,
            "data.dim": self.data.dim, "data.per_class": self.data.per_class,
            "data.test_per_class": self.data.test_per_class, "data.spread": self.data.spread,
            "data.spacing": self.data.spacing, "data.train_path": self.data.train_path,
            "data.test_path": self.data.test_path, "data.header": self.data.header,
        }

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_flat().items())

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        return ExperimentConfig.from_flat({**self.to_flat(), **overrides})


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror or exc}", source=str(path)) from None
    values = parse_text(text, source=str(path))
    values.update(overrides or {})
    return ExperimentConfig.from_flat(values)
