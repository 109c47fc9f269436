"""Experiment configuration: TOML files mapped onto typed sections.

Grammar (all sections and keys optional unless noted)::

    seed = 0                      # root seed, 0 <= seed < 2**64
    model = "ring2d"              # ring2d | gibbs2d | ring4d | turb6d

    [domain]        lower = [...]   upper = [...]
    [trajectory]    dt  burn_in_time  internal_gap
    [sample]        train_count  reference_count  alpha
    [density]       sampler  noise_alpha  steps  points_per_axis  horizon  half_width  record_every
    [grid_solve]    points_per_axis  steps  baseline
    [train]         iterations  batch_train  batch_ref  lr  ema_decay  threshold_l1
                    threshold_l2  rescale  use_residual  init_gain  hidden
    [eval]          points_per_axis  slices  checkpoint
    [qh]            dim  points  sigma
    [thm1]          dim  points  sigma  noise_std  trials

Unknown keys, wrong types and out-of-range values are rejected with the
line they appear on.
"""
import dataclasses
import math
import re
import sys
from dataclasses import dataclass, field, fields
from typing import List, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .models import BUILTIN_NAMES

SAMPLERS = ("mc", "mc-split", "cg", "exact", "exact+noise")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass
class DomainSection:
    lower: Optional[List[float]] = None
    upper: Optional[List[float]] = None


@dataclass
class TrajectorySection:
    dt: float = 1e-3
    burn_in_time: float = 10.0
    internal_gap: Optional[float] = None


@dataclass
class SampleSection:
    train_count: int = 10_000
    reference_count: int = 256
    alpha: float = 0.7


@dataclass
class DensitySection:
    sampler: str = "exact"
    noise_alpha: float = 0.1
    steps: int = 1_000_000
    points_per_axis: int = 40
    horizon: float = 1000.0
    half_width: Optional[float] = None
    record_every: int = 1


@dataclass
class GridSolveSection:
    points_per_axis: int = 50
    steps: int = 1_000_000
    baseline: bool = False


@dataclass
class TrainSection:
    iterations: int = 15_000
    batch_train: int = 128
    batch_ref: Optional[int] = None
    lr: float = 1e-3
    ema_decay: float = 0.99
    threshold_l1: float = 1e-5
    threshold_l2: float = 1e-5
    rescale: bool = True
    use_residual: bool = True
    init_gain: float = 4.0
    hidden: List[int] = field(default_factory=lambda: [16, 128, 128, 128, 16, 4])


@dataclass
class EvalSection:
    points_per_axis: int = 100
    slices: List[List[float]] = field(
        default_factory=lambda: [[0.0, 0.0], [0.5, 0.5], [1.0, 0.0], [1.0, 1.0]]
    )
    checkpoint: Optional[str] = None


@dataclass
class QhSection:
    dim: int = 1
    points: List[int] = field(default_factory=lambda: [8, 16, 32, 64])
    sigma: float = 1.0


@dataclass
class Thm1Section:
    dim: int = 1
    points: List[int] = field(default_factory=lambda: [10, 20, 40, 80])
    sigma: float = 1.0
    noise_std: float = 0.1
    trials: int = 20


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: str = "ring2d"
    domain: DomainSection = field(default_factory=DomainSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    sample: SampleSection = field(default_factory=SampleSection)
    density: DensitySection = field(default_factory=DensitySection)
    grid_solve: GridSolveSection = field(default_factory=GridSolveSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    qh: QhSection = field(default_factory=QhSection)
    thm1: Thm1Section = field(default_factory=Thm1Section)

    def to_dict(self):
        return _drop_none(dataclasses.asdict(self))

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    def with_seed(self, seed):
        _check_seed(seed, None)
        return dataclasses.replace(self, seed=int(seed))


# ------------------------------------------------------------- parsing


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    return obj


class _Locator:
    """Finds the line on which a ``[section] key`` was written."""

    _header = re.compile(r"^\s*\[\s*([A-Za-z0-9_\-]+)\s*\]")
    _key = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")

    def __init__(self, text):
        self.where = {}
        section = None
        for number, line in enumerate(text.splitlines(), start=1):
            head = self._header.match(line)
            if head:
                section = head.group(1)
                self.where.setdefault((section, None), number)
                continue
            key = self._key.match(line)
            if key:
                self.where.setdefault((section, key.group(1)), number)

    def line(self, section, key=None):
        return self.where.get((section, key)) or self.where.get((section, None))


def _type_name(tp):
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(value, tp, where, line):
    origin = getattr(tp, "__origin__", None)
    args = getattr(tp, "__args__", ())
    if origin is type(None) or tp is type(None):
        raise ConfigError(f"{where}: unexpected value", line)
    if origin is not None and type(None) in args:  # Optional[X]
        inner = next(a for a in args if a is not type(None))
        return _coerce(value, inner, where, line)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}", line)
        return [_coerce(v, args[0], where, line) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false", line)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer", line)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number", line)
        if not math.isfinite(value):
            raise ConfigError(f"{where}: must be finite", line)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string", line)
        return value
    raise ConfigError(f"{where}: unsupported type {_type_name(tp)}", line)


def _check_seed(seed, line):
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be an integer in [0, 2**64)", line)


def _build_section(cls, raw, name, loc):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table", loc.line(None, name))
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]", loc.line(name, key))
        kwargs[key] = _coerce(value, known[key].type, f"{name}.{key}", loc.line(name, key))
    return cls(**kwargs)


def _validate(cfg, loc):
    def need(ok, section, key, message):
        if not ok:
            raise ConfigError(f"{section}.{key}: {message}" if section else f"{key}: {message}",
                              loc.line(section, key))

    need(cfg.model in BUILTIN_NAMES, None, "model", f"must be one of {', '.join(BUILTIN_NAMES)}")
    d = cfg.domain
    need((d.lower is None) == (d.upper is None), "domain", "lower", "give both lower and upper")
    if d.lower is not None:
        need(len(d.lower) == len(d.upper), "domain", "upper", "lower and upper differ in length")
        need(all(a < b for a, b in zip(d.lower, d.upper)), "domain", "upper", "need lower < upper on every axis")
    t = cfg.trajectory
    need(t.dt > 0, "trajectory", "dt", "must be positive")
    need(t.burn_in_time >= 0, "trajectory", "burn_in_time", "must be nonnegative")
    need(t.internal_gap is None or t.internal_gap >= t.dt, "trajectory", "internal_gap", "must be >= dt")
    s = cfg.sample
    need(s.train_count >= 1, "sample", "train_count", "must be >= 1")
    need(s.reference_count >= 1, "sample", "reference_count", "must be >= 1")
    need(0.0 <= s.alpha <= 1.0, "sample", "alpha", "must lie in [0, 1]")
    de = cfg.density
    need(de.sampler in SAMPLERS, "density", "sampler", f"must be one of {', '.join(SAMPLERS)}")
    need(0.0 <= de.noise_alpha < 1.0, "density", "noise_alpha", "must lie in [0, 1)")
    need(de.steps >= 0, "density", "steps", "must be nonnegative")
    need(de.points_per_axis >= 3, "density", "points_per_axis", "must be >= 3")
    need(de.horizon > 0, "density", "horizon", "must be positive")
    need(de.half_width is None or de.half_width > 0, "density", "half_width", "must be positive")
    need(de.record_every >= 1, "density", "record_every", "must be >= 1")
    g = cfg.grid_solve
    need(g.points_per_axis >= 3, "grid_solve", "points_per_axis", "must be >= 3")
    need(g.steps >= 1, "grid_solve", "steps", "must be >= 1")
    tr = cfg.train
    need(tr.iterations >= 0, "train", "iterations", "must be nonnegative")
    need(tr.batch_train >= 1, "train", "batch_train", "must be >= 1")
    need(tr.batch_ref is None or tr.batch_ref >= 1, "train", "batch_ref", "must be >= 1")
    need(tr.lr > 0, "train", "lr", "must be positive")
    need(0.0 <= tr.ema_decay < 1.0, "train", "ema_decay", "must lie in [0, 1)")
    need(tr.threshold_l1 >= 0 and tr.threshold_l2 >= 0, "train", "threshold_l1", "thresholds must be nonnegative")
    need(tr.init_gain > 0, "train", "init_gain", "must be positive")
    need(len(tr.hidden) >= 1 and all(k >= 1 for k in tr.hidden), "train", "hidden", "need positive layer widths")
    ev = cfg.eval
    need(ev.points_per_axis >= 3, "eval", "points_per_axis", "must be >= 3")
    need(all(len(sl) >= 1 for sl in ev.slices), "eval", "slices", "each slice needs fixed values")
    for name in ("qh", "thm1"):
        sec = getattr(cfg, name)
        need(sec.dim in (1, 2, 3), name, "dim", "must be 1, 2 or 3")
        need(len(sec.points) >= 2 and all(p >= 3 for p in sec.points), name, "points",
             "need at least two grids with >= 3 points per axis")
        need(sec.sigma > 0, name, "sigma", "must be positive")
    need(cfg.thm1.noise_std > 0, "thm1", "noise_std", "must be positive")
    need(cfg.thm1.trials >= 1, "thm1", "trials", "must be >= 1")


_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig) if f.name not in ("seed", "model")}


def parse_config(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", int(match.group(1)) if match else None) from exc
    loc = _Locator(text)
    kwargs = {}
    for key, value in raw.items():
        if key == "seed":
            _check_seed(value, loc.line(None, "seed"))
            kwargs["seed"] = value
        elif key == "model":
            kwargs["model"] = _coerce(value, str, "model", loc.line(None, "model"))
        elif key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key, loc)
        else:
            raise ConfigError(f"unknown key {key!r}", loc.line(None, key) or loc.line(key))
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg, loc)
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def slice_label(values):
    return "_".join(f"{v:g}" for v in values)


__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config", "SAMPLERS", "slice_label"]
