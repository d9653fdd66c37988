"""TOML run configuration with ``[model]``, ``[sampler]``, ``[data]``,
``[generator]``, ``[two_stage]`` and ``[checks]`` tables.

Unknown keys and mistyped values are rejected with the dotted key path in
the message. Relative data paths resolve against the config file's folder.
"""

from __future__ import annotations

import sys
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fitting import DEFAULT_MAX_LEAPFROG
from .ps_model import ModelSpec, PriorSpec
from .sampler import SamplerConfig
from .synth_trial import PLACEBO_KINDS, GenConfig, PlaceboSpec
from .trial_data import IngestOptions


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class DataConfig:
    students: str = "students.csv"
    mastery: str = "mastery.csv"
    min_students: int = 100
    drop_always_mastered: bool = True
    drop_never_mastered: bool = True

    def ingest(self) -> IngestOptions:
        return IngestOptions(self.min_students, self.drop_always_mastered, self.drop_never_mastered)


@dataclass(frozen=True)
class TwoStageConfig:
    n_draws: int = 200
    blocks: bool = True


@dataclass(frozen=True)
class ChecksConfig:
    n_reps: int = 20
    q3_reps: int = 200
    placebo_kinds: tuple = PLACEBO_KINDS
    random_sd: float = 0.2
    linear_slope: float = 0.2
    quadratic_curvature: float = 0.1
    families: tuple = ("rasch", "3pl")
    n_jobs: int = 1

    def placebo_specs(self, seed: int = 0) -> list[PlaceboSpec]:
        made = {
            "zero": PlaceboSpec("zero", seed=seed),
            "random": PlaceboSpec("random", noise_sd=self.random_sd, seed=seed),
            "linear": PlaceboSpec("linear", slope=self.linear_slope, seed=seed),
            "quadratic": PlaceboSpec("quadratic", curvature=self.quadratic_curvature, seed=seed),
        }
        return [made[k] for k in self.placebo_kinds]


def _default_sampler() -> SamplerConfig:
    return SamplerConfig(max_leapfrog=DEFAULT_MAX_LEAPFROG)


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    sampler: SamplerConfig = field(default_factory=_default_sampler)
    data: DataConfig = field(default_factory=DataConfig)
    generator: GenConfig = field(default_factory=GenConfig)
    two_stage: TwoStageConfig = field(default_factory=TwoStageConfig)
    checks: ChecksConfig = field(default_factory=ChecksConfig)
    source: str = ""

    def to_dict(self) -> dict:
        d = {f.name: _plain(asdict(getattr(self, f.name))) for f in fields(self) if f.name != "source"}
        return d

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or not self.source:
            return p
        return Path(self.source).parent / p


TABLES = {"model": ModelSpec, "sampler": SamplerConfig, "data": DataConfig,
          "generator": GenConfig, "two_stage": TwoStageConfig, "checks": ChecksConfig}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _default_of(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _coerce(path: str, value, default):
    """Check ``value`` against the type of ``default``."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple) or default is None:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected an array, got {value!r}")
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float, str)):
                raise ConfigError(f"{path}[{i}]", f"unsupported element {v!r}")
        return tuple(value)
    raise ConfigError(path, f"unsupported setting {value!r}")


def _build(base, table, path: str):
    """Override fields of the dataclass instance ``base`` from ``table``."""
    if not isinstance(table, dict):
        raise ConfigError(path, "expected a table")
    known = {f.name: f for f in fields(base)}
    kwargs = {}
    for key, value in table.items():
        kp = f"{path}.{key}"
        if key not in known:
            raise ConfigError(kp, f"unknown key (allowed: {', '.join(sorted(known))})")
        current = getattr(base, key)
        if is_dataclass(current):
            kwargs[key] = _build(current, value, kp)
        else:
            kwargs[key] = _coerce(kp, value, current if current is not None else _default_of(known[key]))
    try:
        return replace(base, **kwargs)
    except KeyError as e:
        raise ConfigError(path, str(e.args[0])) from None
    except (ValueError, TypeError) as e:
        raise ConfigError(path, str(e)) from None


def config_from_dict(doc: dict, source: str = "") -> RunConfig:
    base = RunConfig()
    parts = {}
    for key, value in doc.items():
        if key not in TABLES:
            raise ConfigError(key, f"unknown table (allowed: {', '.join(TABLES)})")
        parts[key] = _build(getattr(base, key), value, key)
    return replace(base, **parts, source=source)


def load_config(path=None) -> RunConfig:
    """Parse a TOML config; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        doc = tomllib.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {p}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("", f"{p}: {e}") from None
    return config_from_dict(doc, str(p))


def dumps_toml(cfg: RunConfig) -> str:
    """Serialize a config in the same table layout ``load_config`` reads."""
    out = []
    for table, values in cfg.to_dict().items():
        nested = {k: v for k, v in values.items() if isinstance(v, dict)}
        out.append(f"[{table}]")
        out += [f"{k} = {_toml_value(v)}" for k, v in values.items() if not isinstance(v, dict)]
        for sub, vals in nested.items():
            out.append(f"\n[{table}.{sub}]")
            out += [f"{k} = {_toml_value(v)}" for k, v in vals.items()]
        out.append("")
    return "\n".join(out)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return "[" + ", ".join(_toml_value(x) for x in v) + "]"


__all__ = ["ChecksConfig", "ConfigError", "DataConfig", "PriorSpec", "RunConfig", "TwoStageConfig",
           "config_from_dict", "dumps_toml", "load_config"]
