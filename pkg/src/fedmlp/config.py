"""Flat ``key = value`` experiment configuration.

File format: one ``key = value`` per line, ``#`` starts a comment, blank lines ignored.
Booleans accept true/false/1/0/yes/no. Unknown keys and type errors are collected and
reported together with cross-field violations.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from .data import PartitionSpec
from .model import Hyperparams

STRATEGIES = ("fedavg", "fedprox", "fedproto", "fedmlp")


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    source: str = "synth"
    images_path: str = ""
    labels_path: str = ""
    csv_path: str = ""
    num_classes: int = 10
    d_in: int = 16
    per_class: int = 300
    spread: float = 1.0
    # partitioning
    partition: str = "sharding"
    s: int = 4
    beta: float = 1.0
    gamma: float = 0.5
    num_clients: int = 20
    tasks: int = 5
    test_fraction: float = 0.2
    # strategy
    strategy: str = "fedmlp"
    fedprox_mu: float = 0.01
    loss_prototype: bool = True
    loss_intertask: bool = True
    loss_semantic: bool = True
    aggregation_scope: str = "full"
    weighted_protos: bool = False
    intertask_init: str = "sample"
    schedule: str = "sequential"
    # optimisation
    alpha: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 32
    kl_temperature: float = 1.0
    smooth_l1_delta: float = 1.0
    distance_reduction: str = "sum"
    hidden: int = 64
    feature_dim: int = 32
    # federation
    epochs: int = 50
    rounds_local: int = 20
    m_active: int = 10
    u: int = 0
    v: int = 0
    final_window: int = 10
    workers: int = 1
    # output
    output_dir: str = "runs/default"
    seed: int = 0

    @property
    def total_rounds(self) -> int:
        return self.epochs * self.tasks

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(alpha=self.alpha, lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           kl_temperature=self.kl_temperature, smooth_l1_delta=self.smooth_l1_delta,
                           distance_reduction=self.distance_reduction)

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.partition, self.s, self.beta, self.gamma, self.num_clients,
                             self.tasks, self.seed)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


# config key <-> dataclass field; the loss toggles keep their dotted names
KEY_TO_FIELD = {f.name.replace("loss_", "loss.", 1) if f.name.startswith("loss_") else f.name: f.name
                for f in fields(ExperimentConfig)}
FIELD_TO_KEY = {v: k for k, v in KEY_TO_FIELD.items()}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw, errors: List[str]):
    ftype = _TYPES[KEY_TO_FIELD[key]]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if ftype == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        return text
    except ValueError:
        errors.append(f"{key}: expected {ftype}, got {text!r}")
        return None


def parse_kv_text(text: str, errors: List[str], origin: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{origin}:{lineno}: expected 'key = value'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def validate(cfg: ExperimentConfig) -> List[str]:
    errors = []
    if cfg.source not in ("synth", "idx", "csv"):
        errors.append(f"source: unknown dataset source {cfg.source!r}")
    if cfg.source == "idx" and not (cfg.images_path and cfg.labels_path):
        errors.append("images_path, labels_path: both required for source = idx")
    if cfg.source == "csv" and not cfg.csv_path:
        errors.append("csv_path: required for source = csv")
    if cfg.num_classes < 2:
        errors.append("num_classes: must be >= 2")
    if cfg.d_in < 1 or cfg.per_class < 1:
        errors.append("d_in, per_class: must be >= 1")
    if not cfg.spread > 0:
        errors.append("spread: must be > 0")
    errors += cfg.partition_spec().validate()
    if not 0 < cfg.test_fraction < 1:
        errors.append("test_fraction: must lie in (0, 1)")
    if cfg.strategy not in STRATEGIES:
        errors.append(f"strategy: must be one of {', '.join(STRATEGIES)}")
    if cfg.fedprox_mu < 0:
        errors.append("fedprox_mu: must be >= 0")
    if cfg.aggregation_scope not in ("full", "extractor_only"):
        errors.append("aggregation_scope: must be full or extractor_only")
    if cfg.intertask_init not in ("sample", "class_mean"):
        errors.append("intertask_init: must be sample or class_mean")
    if cfg.schedule not in ("sequential", "interleaved"):
        errors.append("schedule: must be sequential or interleaved")
    if cfg.distance_reduction not in ("sum", "mean"):
        errors.append("distance_reduction: must be sum or mean")
    if cfg.alpha < 0:
        errors.append("alpha: must be >= 0")
    for name in ("lr", "kl_temperature", "smooth_l1_delta"):
        if not getattr(cfg, name) > 0:
            errors.append(f"{name}: must be > 0")
    if not 0 <= cfg.momentum < 1:
        errors.append("momentum: must lie in [0, 1)")
    if cfg.weight_decay < 0:
        errors.append("weight_decay: must be >= 0")
    for name in ("batch_size", "hidden", "feature_dim", "epochs", "rounds_local", "m_active",
                 "final_window", "workers"):
        if getattr(cfg, name) < 1:
            errors.append(f"{name}: must be >= 1")
    if cfg.u < 0 or cfg.v < 0:
        errors.append("u, v: cluster counts must be >= 0 (0 = automatic)")
    if cfg.m_active > cfg.num_clients:
        errors.append(f"m_active, num_clients: m_active ({cfg.m_active}) exceeds num_clients ({cfg.num_clients})")
    return errors


def build_config(values: Mapping[str, object], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    errors: List[str] = []
    kwargs = {}
    for key, raw in values.items():
        if key not in KEY_TO_FIELD:
            errors.append(f"{key}: unknown key")
            continue
        value = _coerce(key, raw, errors)
        if value is not None:
            kwargs[KEY_TO_FIELD[key]] = value
    if errors:
        raise ConfigError(errors)
    cfg = replace(base or ExperimentConfig(), **kwargs)
    errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(file_path=None, flag_overrides: Optional[Mapping[str, object]] = None) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``flag_overrides``; validated as a whole."""
    errors: List[str] = []
    values: Dict[str, object] = {}
    if file_path:
        values.update(parse_kv_text(Path(file_path).read_text(), errors, str(file_path)))
    if errors:
        raise ConfigError(errors)
    values.update(flag_overrides or {})
    return build_config(values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["# resolved experiment configuration"]
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{FIELD_TO_KEY[f.name]} = {value}")
    return "\n".join(lines) + "\n"
