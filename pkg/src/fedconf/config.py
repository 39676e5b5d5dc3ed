"""Flat ``key = value`` experiment configuration.

One key per line, ``#`` starts a comment, blank lines are ignored. Every key
has a default (see ``ExperimentConfig``); unknown or repeated keys are
rejected. List values are comma separated. The resolved configuration is
rendered back in the same format so any output directory can be re-run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from fedconf.aggregation import METHODS, AggregationMethod
from fedconf.confidence import EntropyMode
from fedconf.errors import ConfigError, ParseError
from fedconf.federation import FedConfig

MODES = ("iid", "non_iid")


@dataclass
class ExperimentConfig:
    # dataset
    seed: int = 0
    n_trips: int = 5
    input_dim: int = 8
    n_samples: int = 2000
    cluster_stddev: float = 0.5
    mean_scale: float = 2.0
    noise_stddev: float = 0.05
    target_frequency: float = 3.0
    target_scale: float = 1.0
    target_projection: str = "uniform"
    # federation
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    modes: tuple[str, ...] = MODES
    methods: tuple[str, ...] = METHODS
    rounds: int = 100
    clients: int = 5
    participation_fraction: float = 1.0
    local_epochs: int = 5
    local_batch: int = 64
    local_lr: float = 1e-4
    local_weight_decay: float = 1e-5
    local_optimizer: str = "adam"
    eval_every: int = 1
    hidden_dims: tuple[int, ...] = (64, 32, 16)
    workers: int = 1
    record_wall_ms: bool = False
    # aggregation
    distill_steps: int = 0  # 0: one pass over the public pool per round
    distill_lr: float = 0.01
    distill_batch: int = 64
    entropy_mode: str = "normalized"
    entropy_epsilon: float = 1e-12
    # divergence validation
    validate_public_fraction: float = 0.1
    validate_optimizer: str = "sgd"
    validate_lr: float = 0.05
    validate_epochs: int = 20
    validate_batch: int = 64
    validate_weight_decay: float = 0.0
    validate_shared_init: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.target_projection not in ("uniform", "random"):
            raise ConfigError(f"target_projection must be 'uniform' or 'random', got {self.target_projection!r}")
        if self.entropy_mode not in ("normalized", "raw"):
            raise ConfigError(f"entropy_mode must be 'normalized' or 'raw', got {self.entropy_mode!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r} in methods; choose from {METHODS}")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r} in modes; choose from {MODES}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if not 0.0 < self.validate_public_fraction < 1.0:
            raise ConfigError("validate_public_fraction must lie in (0, 1)")
        for name in ("n_trips", "input_dim", "n_samples", "validate_epochs", "validate_batch", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.distill_steps < 0:
            raise ConfigError("distill_steps must be >= 0")
        if self.validate_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown validate_optimizer {self.validate_optimizer!r}")
        # surface federation/aggregation errors at load time
        self.fed_config("fedavg", self.seeds[0])
        for m in self.methods:
            self.aggregation(m)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, 1)

    def entropy(self) -> EntropyMode:
        return EntropyMode(normalize=self.entropy_mode == "normalized", epsilon=self.entropy_epsilon)

    def aggregation(self, kind: str) -> AggregationMethod:
        return AggregationMethod(kind, self.distill_steps or None, self.distill_lr, self.distill_batch, self.entropy())

    def fed_config(self, kind: str, seed: int) -> FedConfig:
        return FedConfig(
            rounds=self.rounds, clients=self.clients, participation_fraction=self.participation_fraction,
            local_epochs=self.local_epochs, local_batch=self.local_batch, local_lr=self.local_lr,
            local_weight_decay=self.local_weight_decay, local_optimizer=self.local_optimizer,
            method=self.aggregation(kind), seed=seed, eval_every=self.eval_every, dims=self.dims,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _field_types() -> dict[str, object]:
    return {f.name: f.default for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str, default, line: int):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return type(default)(raw)
    except ValueError:
        raise ParseError(f"bad value {raw!r} for key {key!r}", line) from None


def parse_config(text: str) -> ExperimentConfig:
    defaults = _field_types()
    values: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'key = value', got {body!r}", n)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r} (line {n})")
        if key in values:
            raise ConfigError(f"config key {key!r} set twice (line {n})")
        values[key] = _coerce(key, raw, defaults[key], n)
    return ExperimentConfig(**values)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text())


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, tuple):
            s = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"
