"""Analysis configuration read from a TOML file.

Relative paths are resolved against the directory holding the config file.
The echo and hash deliberately leave out the output directory, so the same
analysis written to two places yields identical bundles.
"""

from __future__ import annotations

import hashlib
import json
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .sequences import Schema, SessionizationPolicy


@dataclass
class InputConfig:
    events: str | None = None
    covariates: str | None = None
    covariate_unit: str | None = None  # defaults to schema.unit
    covariate_columns: list[str] | None = None
    alphabet: list[str] | None = None
    tally_scope: str = "session"
    schema: dict = field(default_factory=dict)


@dataclass
class SessionConfig:
    mode: str = "fixed_gap"
    gap_minutes: float = 20.0
    quantile: float = 0.9


@dataclass
class PatternConfig:
    dyad_threshold: float = 0.1
    clique_threshold: float = 0.05
    clique_size: int = 3


@dataclass
class CommunityConfig:
    gamma: float = 1.0
    t_start: float = 1.0
    factor: float = 0.99
    sweeps: int = 50
    t_stop: float = 1e-3


@dataclass
class MixtureConfig:
    k_range: list[int] = field(default_factory=lambda: list(range(2, 9)))
    restarts: int = 500
    tol: float = 1e-8
    max_iter: int = 1000
    covariates: list[str] | None = None


@dataclass
class ValidationConfig:
    bootstrap_b: int = 1000
    threshold: float = 0.05
    alpha: float = 0.05
    rule: str = "threshold-p"
    n_perm: int = 1000
    drop_props: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
    n_reps: int = 250
    measures: list[str] = field(default_factory=lambda: ["in_strength", "betweenness"])
    disparity_significance: float = 0.05


@dataclass
class CompareConfig:
    group_column: str | None = None
    groups: list[str] | None = None


@dataclass
class SimulateConfig:
    labels: list[str] | None = None
    initial: list[float] | None = None
    matrix: list[list[float]] | None = None
    components: list[dict] | None = None  # each: {initial, matrix, weight}
    n_units: int = 20
    sessions_per_unit: int = 5
    session_length: int = 20
    actors_per_unit: int = 3
    covariate_effect: float = 0.0  # logit shift per unit of x for each later component
    step_seconds: float = 60.0
    session_gap_seconds: float = 7200.0
    start: str = "2024-01-01T09:00:00"
    events_file: str = "simulated_events.csv"
    covariates_file: str = "simulated_covariates.csv"
    truth_file: str = "simulated_truth.json"


@dataclass
class AnalysisConfig:
    seed: int = 0
    out_dir: str = "tna_out"
    scaling: str = "stochastic"
    threads: int = 1
    input: InputConfig = field(default_factory=InputConfig)
    sessions: SessionConfig = field(default_factory=SessionConfig)
    patterns: PatternConfig = field(default_factory=PatternConfig)
    communities: CommunityConfig = field(default_factory=CommunityConfig)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    base_dir: Path = field(default_factory=Path.cwd, repr=False, compare=False)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def schema(self) -> Schema:
        try:
            return Schema(**self.input.schema)
        except TypeError as exc:
            raise ConfigError(f"bad [input.schema]: {exc}") from None

    def policy(self) -> SessionizationPolicy:
        s = self.sessions
        return SessionizationPolicy(s.mode, gap=s.gap_minutes * 60.0, quantile=s.quantile)

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("base_dir", None)
        d.pop("out_dir", None)
        return d

    def digest(self) -> str:
        text = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def stamp(self) -> list[str]:
        return [f"config_hash={self.digest()}", f"seed={self.seed}"]

    def task_seed(self, task: str) -> int:
        """Stable child seed per task so commands can be re-run independently."""
        ss = np.random.SeedSequence([int(self.seed), zlib.crc32(task.encode())])
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known or key == "base_dir":
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        default = known[key].default_factory() if callable(known[key].default_factory) else None
        if is_dataclass(default) and key != "schema":
            kwargs[key] = _build(type(default), value, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict, base_dir: Path | None = None) -> AnalysisConfig:
    cfg = _build(AnalysisConfig, dict(data), "")
    cfg.base_dir = Path(base_dir) if base_dir else Path.cwd()
    validate(cfg)
    return cfg


def load_config(path) -> AnalysisConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, path.parent.resolve())


def validate(cfg: AnalysisConfig) -> None:
    if cfg.scaling not in ("stochastic", "frequency", "count"):
        raise ConfigError(f"scaling must be stochastic, frequency or count, got {cfg.scaling!r}")
    if cfg.input.tally_scope not in ("session", "unit"):
        raise ConfigError("input.tally_scope must be 'session' or 'unit'")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    cfg.policy()
    cfg.schema()


def check_paths(cfg: AnalysisConfig, *names: str) -> None:
    """Fail with exit code 2 when a referenced input file is missing."""
    for name in names:
        raw = getattr(cfg.input, name)
        if raw is None:
            if name == "events":
                raise ConfigError("no input events file configured ([input] events)")
            continue
        p = cfg.resolve(raw)
        if not p.exists():
            raise ConfigError(f"input file not found: {p}")
