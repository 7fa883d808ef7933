"""Experiment configuration: presets, model suites, file loading and checks.

Config files are JSON. Every field has a default except the preset; the
model suite is normally derived from a heterogeneity case at desk scale,
with the literal sizes behind scale="literal" for accounting runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .model import ModelConfig

PRESETS = ("agg", "noagg", "scratch", "fedavg_matched")
HETERO_CASES = ("base", "case1", "case2")
SCALES = ("desk", "literal")

# (hidden, layers) rows per heterogeneity case; heads divide every width.
_DESK_CASES = {
    "base": {"smalls": [(16, 1), (16, 2), (16, 3)], "inter": (20, 3), "large": (24, 4), "heads": 4},
    "case1": {
        "smalls": [(16, 1), (16, 2), (16, 3), (12, 1), (12, 2), (12, 3)],
        "inter": (20, 3),
        "large": (24, 4),
        "heads": 4,
    },
    "case2": {
        "smalls": [(16, 1), (16, 2), (16, 3), (16, 4), (16, 5)],
        "inter": (20, 6),
        "large": (24, 7),
        "heads": 4,
    },
}
_LITERAL_CASES = {
    "base": {"smalls": [(256, 2), (256, 3), (256, 4)], "inter": (320, 4), "large": (384, 6), "heads": 8},
    "case1": {
        "smalls": [(256, 2), (256, 3), (256, 4), (192, 2), (192, 3), (192, 4)],
        "inter": (320, 4),
        "large": (384, 6),
        "heads": 8,
    },
    "case2": {
        "smalls": [(256, 2), (256, 3), (256, 4), (256, 5), (256, 6)],
        "inter": (320, 7),
        "large": (384, 8),
        "heads": 8,
    },
}


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 64
    num_classes: int = 4
    seq_len: int = 12
    train_size: int = 2000
    test_size: int = 600
    separation: float = 0.5


@dataclass(frozen=True)
class TrainSpec:
    e_pre: int = 15
    e_l: int = 10
    e_g: int = 2
    rounds: int = 6
    batch_size: int = 32
    lr_pretrain: float = 3e-3
    lr_local: float = 3e-3
    lr_global: float = 3e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.01


@dataclass(frozen=True)
class OperatorSpec:
    # Random local maps give each client its own intermediate basis; the
    # identity-preserving shared map starts every client in the same
    # structural basin, which is what makes averaging meaningful.
    local_scheme: str = "random"
    global_scheme: str = "identity_preserving"
    per_family: bool = True


@dataclass(frozen=True)
class ModelSuite:
    smalls: tuple[ModelConfig, ...]
    intermediate: ModelConfig
    large: ModelConfig


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str
    seed: int = 0
    n_clients: int = 4
    beta: float = 0.5
    min_shard: int = 8
    hetero_case: str = "base"
    scale: str = "desk"
    ffn_multiplier: int = 2
    task: TaskSpec = field(default_factory=TaskSpec)
    training: TrainSpec = field(default_factory=TrainSpec)
    operator: OperatorSpec = field(default_factory=OperatorSpec)

    def suite(self) -> ModelSuite:
        return build_suite(
            self.hetero_case,
            self.scale,
            self.ffn_multiplier,
            self.task.vocab_size,
            self.task.num_classes,
            self.task.seq_len,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def build_suite(
    hetero_case: str,
    scale: str,
    ffn_multiplier: int,
    vocab_size: int,
    num_classes: int,
    seq_len: int,
) -> ModelSuite:
    table = _DESK_CASES if scale == "desk" else _LITERAL_CASES
    case = table[hetero_case]
    shared = dict(
        num_heads=case["heads"],
        num_classes=num_classes,
        ffn_multiplier=ffn_multiplier,
        vocab_size=vocab_size,
        max_seq_len=seq_len,
    )

    def cfg(pair):
        return ModelConfig(hidden_dim=pair[0], num_layers=pair[1], **shared)

    return ModelSuite(
        smalls=tuple(cfg(p) for p in case["smalls"]),
        intermediate=cfg(case["inter"]),
        large=cfg(case["large"]),
    )


class ConfigError(ValueError):
    """Configuration file failed validation; .errors lists every violation."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def _check(cfg: ExperimentConfig) -> list[str]:
    errors = []
    if cfg.preset not in PRESETS:
        errors.append(f"preset: {cfg.preset!r} not in {PRESETS}")
    if cfg.hetero_case not in HETERO_CASES:
        errors.append(f"hetero_case: {cfg.hetero_case!r} not in {HETERO_CASES}")
    if cfg.scale not in SCALES:
        errors.append(f"scale: {cfg.scale!r} not in {SCALES}")
    if cfg.n_clients < 1:
        errors.append(f"n_clients: must be >= 1, got {cfg.n_clients}")
    if not cfg.beta > 0:
        errors.append(f"beta: must be positive, got {cfg.beta}")
    if cfg.min_shard < 0:
        errors.append(f"min_shard: must be >= 0, got {cfg.min_shard}")
    t = cfg.task
    if t.vocab_size < t.num_classes:
        errors.append(f"task.vocab_size: {t.vocab_size} smaller than task.num_classes {t.num_classes}")
    if t.num_classes < 2:
        errors.append(f"task.num_classes: must be >= 2, got {t.num_classes}")
    if t.train_size < t.num_classes or t.test_size < 1:
        errors.append("task: train_size must cover all classes and test_size be positive")
    if not 0.0 <= t.separation <= 1.0:
        errors.append(f"task.separation: must be in [0, 1], got {t.separation}")
    tr = cfg.training
    for name in ("e_pre", "e_l", "e_g", "rounds"):
        if getattr(tr, name) < 0:
            errors.append(f"training.{name}: must be >= 0")
    if tr.batch_size < 1:
        errors.append("training.batch_size: must be >= 1")
    for name in ("lr_pretrain", "lr_local", "lr_global"):
        if not getattr(tr, name) > 0:
            errors.append(f"training.{name}: must be positive")
    if tr.optimizer not in ("sgd", "adamw"):
        errors.append(f"training.optimizer: {tr.optimizer!r} not in ('sgd', 'adamw')")
    for name in ("local_scheme", "global_scheme"):
        value = getattr(cfg.operator, name)
        if value not in ("identity_preserving", "random"):
            errors.append(f"operator.{name}: {value!r} unknown")
    if not errors and cfg.hetero_case in HETERO_CASES and cfg.scale in SCALES:
        try:
            suite = cfg.suite()
        except ValueError as exc:
            errors.append(f"models: {exc}")
            return errors
        inter, large = suite.intermediate, suite.large
        for i, small in enumerate(suite.smalls):
            if inter.hidden_dim < small.hidden_dim or inter.num_layers < small.num_layers:
                errors.append(
                    f"models: intermediate ({inter.hidden_dim}/{inter.num_layers}) does not "
                    f"dominate small#{i + 1} ({small.hidden_dim}/{small.num_layers})"
                )
        if large.hidden_dim < inter.hidden_dim or large.num_layers < inter.num_layers:
            errors.append(
                f"models: large ({large.hidden_dim}/{large.num_layers}) does not dominate "
                f"intermediate ({inter.hidden_dim}/{inter.num_layers})"
            )
    return errors


def _build_block(mapping: dict, cls, prefix: str, errors: list[str]):
    known = set(cls.__dataclass_fields__)
    for name in sorted(set(mapping) - known):
        errors.append(f"{prefix}{name}: unknown field")
    try:
        return cls(**{k: v for k, v in mapping.items() if k in known})
    except (TypeError, ValueError) as exc:
        errors.append(f"{prefix.rstrip('.') or 'config'}: {exc}")
        return cls() if prefix else None


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Normalize a raw mapping into an ExperimentConfig; raise ConfigError listing
    every violation (no partial acceptance)."""
    if not isinstance(raw, dict):
        raise ConfigError(["config: expected a JSON object"])
    errors: list[str] = []
    raw = dict(raw)
    blocks = {}
    for key, cls in (("task", TaskSpec), ("training", TrainSpec), ("operator", OperatorSpec)):
        block = raw.pop(key, {})
        if not isinstance(block, dict):
            errors.append(f"{key}: expected an object")
            block = {}
        blocks[key] = _build_block(block, cls, f"{key}.", errors)
    if "preset" not in raw:
        errors.append("preset: required field missing")
        raw["preset"] = PRESETS[0]  # placeholder so remaining checks still run
    known = set(ExperimentConfig.__dataclass_fields__) - set(blocks)
    for name in sorted(set(raw) - known):
        errors.append(f"{name}: unknown field")
    cfg = None
    try:
        cfg = ExperimentConfig(**{k: v for k, v in raw.items() if k in known}, **blocks)
    except (TypeError, ValueError) as exc:
        errors.append(f"config: {exc}")
    if cfg is not None:
        errors.extend(_check(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(path) -> ExperimentConfig:
    """Load and normalize a JSON config file; all defaults filled."""
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"config file not found: {p}"])
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    return config_from_dict(raw)
