"""Pipeline configuration: a sectioned key-value file validated at load time.

Every key has a default, so an empty file (or none at all) is a valid
configuration. ``auto`` values are filled from a dataset's ``truth.json``
when one is present.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .spectral import candidate_periods, fourier_periods
from .svgp import TrainConfig
from .synth import SCENARIOS

CANDIDATE_GRIDS = ("linear", "fourier")
MODEL_KINDS = ("copamap", "gphom", "ml", "fremen")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1


@dataclass(frozen=True)
class DataConfig:
    fov_radius: Optional[float] = None  # None: from truth.json
    time_step: Optional[float] = None
    speed: float = 0.5
    downsample_hz: Optional[float] = None
    train_span: Optional[tuple] = None
    test_span: Optional[tuple] = None


@dataclass(frozen=True)
class GridConfig:
    r_s: float = 0.75
    tau: float = 3600.0


@dataclass(frozen=True)
class InitConfig:
    l: int = 10
    psi_max: int = 10
    sigma2_max: float = 0.95
    alpha: float = 0.02
    candidates: str = "fourier"
    min_period: float = 3600.0
    max_period: float = 7 * 86400.0
    n_candidates: int = 200
    folds: int = 5
    init_r_s: float = 5.0
    init_tau: float = 3600.0

    def periods(self, span: float) -> np.ndarray:
        """The candidate set for a training record of length ``span`` seconds."""
        if self.candidates == "linear":
            return candidate_periods(self.min_period, self.max_period, self.n_candidates)
        return fourier_periods(span, self.min_period, self.max_period)


@dataclass(frozen=True)
class BenchConfig:
    base_cost: float = 0.05
    speed: float = 0.5
    radius: float = 1.0
    first_hour: float = 9.0
    last_hour: float = 21.0
    per_hour: int = 5
    goals: Optional[tuple] = None  # None: from truth.json
    models: tuple = ("copamap", "gphom", "ml")


@dataclass(frozen=True)
class SynthConfig:
    scenario: str = "benchmark"
    train_days: Optional[int] = None  # None: the scenario's own default
    test_days: Optional[int] = None


@dataclass(frozen=True)
class PipelineConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    init: InitConfig = field(default_factory=InitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        validate(self)
        if self.train.seed != self.run.seed:  # one seed drives every stage
            object.__setattr__(self, "train", replace(self.train, seed=self.run.seed))

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, run=replace(self.run, seed=int(seed)))

    def with_resolution(self, r_s: float, tau: float) -> "PipelineConfig":
        return replace(self, grid=GridConfig(float(r_s), float(tau)))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def to_ini(self) -> str:
        out = []
        for sec in fields(self):
            out.append(f"[{sec.name}]")
            for key, value in asdict(getattr(self, sec.name)).items():
                if (sec.name, key) == ("train", "seed"):
                    continue
                out.append(f"{key} = {_format(value)}")
            out.append("")
        return "\n".join(out)


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return "; ".join(", ".join(repr(float(v)) for v in pair) for pair in value)
        return ", ".join(v if isinstance(v, str) else repr(v) for v in value)
    return str(value) if isinstance(value, str) else repr(value)


def _check(ok: bool, message: str) -> None:
    if not ok:
        raise DataError(f"config: {message}")


def validate(cfg: PipelineConfig) -> None:
    """Reject values that any module would refuse later."""
    _check(cfg.run.threads >= 1, "run.threads must be >= 1")
    d = cfg.data
    for key in ("fov_radius", "time_step", "downsample_hz"):
        v = getattr(d, key)
        _check(v is None or (math.isfinite(v) and v > 0), f"data.{key} must be positive")
    _check(d.speed > 0, "data.speed must be positive")
    for key in ("train_span", "test_span"):
        v = getattr(d, key)
        _check(v is None or (len(v) == 2 and v[0] < v[1]), f"data.{key} must be 'start, end' with start < end")
    _check(cfg.grid.r_s > 0 and cfg.grid.tau > 0, "grid.r_s and grid.tau must be positive")
    i = cfg.init
    _check(i.l >= 1, "init.l must be >= 1")
    _check(i.psi_max >= 0, "init.psi_max must be >= 0")
    _check(0 < i.sigma2_max <= 1, "init.sigma2_max must lie in (0, 1]")
    _check(0 < i.alpha <= 1, "init.alpha must lie in (0, 1]")
    _check(i.candidates in CANDIDATE_GRIDS, f"init.candidates must be one of {CANDIDATE_GRIDS}")
    _check(0 < i.min_period < i.max_period, "init periods need 0 < min_period < max_period")
    _check(i.n_candidates >= 2, "init.n_candidates must be >= 2")
    _check(i.folds >= 2, "init.folds must be >= 2")
    _check(i.init_r_s > 0 and i.init_tau > 0, "init.init_r_s and init.init_tau must be positive")
    b = cfg.bench
    _check(b.base_cost >= 0, "bench.base_cost must be >= 0")
    _check(b.speed > 0 and b.radius >= 0, "bench.speed must be positive and bench.radius >= 0")
    _check(0 <= b.first_hour < b.last_hour <= 24, "bench hours need 0 <= first_hour < last_hour <= 24")
    _check(b.per_hour >= 1, "bench.per_hour must be >= 1")
    _check(b.goals is None or len(b.goals) >= 2, "bench.goals needs at least two points")
    _check(all(m in MODEL_KINDS for m in b.models) and b.models, f"bench.models must be drawn from {MODEL_KINDS}")
    s = cfg.synth
    _check(s.scenario in SCENARIOS, f"synth.scenario must be one of {sorted(SCENARIOS)}")
    for key in ("train_days", "test_days"):
        v = getattr(s, key)
        _check(v is None or v >= 1, f"synth.{key} must be >= 1")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _parse_value(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if raw.lower() in ("auto", "none", ""):
            return None
        if name == "goals":
            return tuple(tuple(float(v) for v in pair.split(",")) for pair in raw.split(";") if pair.strip())
        if name in ("train_span", "test_span"):
            return tuple(float(v) for v in raw.split(","))
        if name in ("train_days", "test_days"):
            return int(raw)
        if name == "models":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        return raw
    except (ValueError, KeyError):
        raise DataError(f"config: cannot parse {name} = {raw!r}") from None


def parse_config(text: str, source: str = "<string>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (train_Z)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise DataError(f"config: {exc}") from None
    base = PipelineConfig()
    sections = {f.name: getattr(base, f.name) for f in fields(base)}
    unknown = set(parser.sections()) - set(sections)
    if unknown:
        raise DataError(f"config: unknown section(s) {sorted(unknown)}")
    built = {}
    for name, default in sections.items():
        values = asdict(default)
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in values or (name, key) == ("train", "seed"):
                    hint = " (set run.seed instead)" if key == "seed" else ""
                    raise DataError(f"config: unknown key {name}.{key}{hint}")
                values[key] = _parse_value(raw, values[key], key)
                if values[key] is None and getattr(default, key) is not None:
                    raise DataError(f"config: {name}.{key} cannot be auto")
        try:
            built[name] = type(default)(**values)
        except DataError as exc:
            raise DataError(f"config: [{name}] {exc}") from None
    return PipelineConfig(**built)


def load_config(path=None) -> PipelineConfig:
    """Defaults when ``path`` is None; otherwise the file's values over the defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such config file: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))
