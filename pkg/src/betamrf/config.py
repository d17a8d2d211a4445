"""Flat ``section.key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys are rejected so typos surface as validation errors.

Example::

    seed = 7
    model.topology = markov
    model.p = 1
    data.source = gbm
    data.sigma_rn = 0.10
    data.tenors = 0.25, 0.5, 1.0
    sampler.n_iter = 5000
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .market import GbmSpec
from .mcmc import GIBBS_SCHEMES, STEP1_TARGETS, SamplerConfig
from .model import HyperParams, MaturityGrid, NeighborhoodSystem, ThetaLayout, Topology


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


DATA_SOURCES = ("gbm", "smiles")


@dataclass(frozen=True)
class ModelConfig:
    p: int = 1
    topology: str = "markov"
    pooled: bool = False
    step1_target: str = "posterior"


@dataclass(frozen=True)
class DataConfig:
    source: str = "gbm"
    gbm: GbmSpec = field(default_factory=GbmSpec)
    tenors: tuple[float, ...] = (0.25, 0.5, 1.0)
    start_date: str = "2010-01-04"
    smile_csv: str | None = None
    realized_csv: str | None = None


@dataclass(frozen=True)
class RndConfig:
    lam: float = 0.99
    grid_size: int = 500


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    model: ModelConfig = field(default_factory=ModelConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    rnd: RndConfig = field(default_factory=RndConfig)
    out: str = "out"
    include_runtime: bool = False

    @property
    def grid(self) -> MaturityGrid:
        return MaturityGrid(self.data.tenors, self.data.gbm.steps_per_year)

    def nbhd(self, M: int | None = None) -> NeighborhoodSystem:
        return NeighborhoodSystem(Topology(self.model.topology), len(self.data.tenors) if M is None else M)

    def layout(self, M: int | None = None) -> ThetaLayout:
        return ThetaLayout(self.model.p, self.nbhd(M), self.model.pooled)

    def flat(self) -> dict[str, object]:
        """Every setting under its dotted key (for sidecars)."""
        out: dict[str, object] = {"seed": self.seed, "output.dir": self.out, "output.include_runtime": self.include_runtime}
        for name, obj in (("model", self.model), ("hyper", self.hyper), ("rnd", self.rnd)):
            for f in dataclasses.fields(obj):
                out[f"{name}.{f.name}"] = getattr(obj, f.name)
        for key in _SAMPLER_KEYS:
            out[f"sampler.{key}"] = getattr(self.sampler, key)
        out["data.source"] = self.data.source
        for f in dataclasses.fields(GbmSpec):
            out[f"data.{f.name}"] = getattr(self.data.gbm, f.name)
        out["data.tenors"] = list(self.data.tenors)
        out["data.start_date"] = self.data.start_date
        out["data.smile_csv"] = self.data.smile_csv
        out["data.realized_csv"] = self.data.realized_csv
        return out


_SAMPLER_KEYS = ("n_iter", "n_burnin", "inner_sweeps", "adapt", "adapt_window", "adapt_shape", "gibbs_scheme", "init", "proposal", "adapt_on")
_GBM_KEYS = tuple(f.name for f in dataclasses.fields(GbmSpec))


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def _to_bool(key, v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _to_int(key, v: str) -> int:
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def _to_float(key, v: str) -> float:
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _typed(key: str, value: str, default):
    if isinstance(default, bool):
        return _to_bool(key, value)
    if isinstance(default, int):
        return _to_int(key, value)
    if isinstance(default, float):
        return _to_float(key, value)
    return value


def _build(cls, prefix: str, values: dict[str, str], keys=None, defaults=None):
    """Instantiate a dataclass from ``prefix.<field>`` entries, re-raising errors with the dotted name."""
    defaults = defaults or cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if keys is not None and f.name not in keys:
            continue
        key = f"{prefix}.{f.name}"
        if key in values:
            kwargs[f.name] = _typed(key, values[key], getattr(defaults, f.name))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{prefix}.{exc}") from None


def config_from_mapping(values: dict[str, str], seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Validate a flat mapping; ``seed``/``out`` override the file when given."""
    known = {"seed", "output.dir", "output.include_runtime", "data.source", "data.tenors", "data.start_date",
             "data.smile_csv", "data.realized_csv"}
    known |= {f"model.{f.name}" for f in dataclasses.fields(ModelConfig)}
    known |= {f"hyper.{f.name}" for f in dataclasses.fields(HyperParams)}
    known |= {f"sampler.{k}" for k in _SAMPLER_KEYS}
    known |= {f"rnd.{f.name}" for f in dataclasses.fields(RndConfig)}
    known |= {f"data.{k}" for k in _GBM_KEYS}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")

    if seed is None:
        if "seed" not in values:
            raise ConfigError("seed: a seed is required (config file or --seed)")
        seed = _to_int("seed", values["seed"])
    if seed < 0:
        raise ConfigError("seed: must be non-negative")

    model = _build(ModelConfig, "model", values)
    if model.p < 0:
        raise ConfigError("model.p: lag order must be non-negative")
    if model.topology not in {t.value for t in Topology}:
        raise ConfigError(f"model.topology: expected one of {[t.value for t in Topology]}")
    if model.step1_target not in STEP1_TARGETS:
        raise ConfigError(f"model.step1_target: expected one of {STEP1_TARGETS}")

    hyper = _build(HyperParams, "hyper", values)

    sampler_kwargs = {}
    defaults = SamplerConfig()
    for k in _SAMPLER_KEYS:
        key = f"sampler.{k}"
        if key in values:
            sampler_kwargs[k] = _typed(key, values[key], getattr(defaults, k))
    if sampler_kwargs.get("gibbs_scheme", "auto") not in GIBBS_SCHEMES:
        raise ConfigError(f"sampler.gibbs_scheme: expected one of {GIBBS_SCHEMES}")
    try:
        sampler = SamplerConfig(**sampler_kwargs, step1_target=model.step1_target, seed=seed)
    except ValueError as exc:
        raise ConfigError(f"sampler.{exc}") from None
    if sampler.n_iter == 0:
        raise ConfigError("sampler.n_iter: must be positive")

    source = values.get("data.source", "gbm")
    if source not in DATA_SOURCES:
        raise ConfigError(f"data.source: expected one of {DATA_SOURCES}")
    gbm = _build(GbmSpec, "data", values, keys=_GBM_KEYS)
    tenors = DataConfig().tenors
    if "data.tenors" in values:
        tenors = tuple(_to_float("data.tenors", t) for t in values["data.tenors"].split(",") if t.strip())
        if not tenors:
            raise ConfigError("data.tenors: need at least one tenor")
    try:
        grid = MaturityGrid(tenors, gbm.steps_per_year)
    except ValueError as exc:
        raise ConfigError(f"data.tenors: {exc}") from None
    data = DataConfig(
        source=source,
        gbm=gbm,
        tenors=tuple(grid.tenors),
        start_date=values.get("data.start_date", DataConfig().start_date),
        smile_csv=values.get("data.smile_csv"),
        realized_csv=values.get("data.realized_csv"),
    )
    if source == "gbm":
        if data.smile_csv or data.realized_csv:
            raise ConfigError("data.smile_csv: only one data source allowed; data.source is gbm")
        if max(grid.lookahead_days) >= gbm.n_prices:
            raise ConfigError("data.horizon_years: horizon must exceed the longest tenor")
    else:
        for key, path in (("data.smile_csv", data.smile_csv), ("data.realized_csv", data.realized_csv)):
            if not path:
                raise ConfigError(f"{key}: required when data.source is smiles")
    rnd = _build(RndConfig, "rnd", values)
    if not 0 < rnd.lam <= 1:
        raise ConfigError("rnd.lam: must be in (0, 1]")
    if rnd.grid_size < 3:
        raise ConfigError("rnd.grid_size: need at least 3 strikes")
    return ExperimentConfig(
        seed=seed,
        model=model,
        hyper=hyper,
        sampler=sampler,
        data=data,
        rnd=rnd,
        out=out if out is not None else values.get("output.dir", "out"),
        include_runtime=_to_bool("output.include_runtime", values.get("output.include_runtime", "false")),
    )


def load_config(path=None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    if path is None:
        return config_from_mapping({}, seed=seed, out=out)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {path}")
    values = parse_flat(p.read_text(), str(p))
    base = p.parent
    for key in ("data.smile_csv", "data.realized_csv"):
        if key in values and not Path(values[key]).is_absolute():
            values[key] = str(base / values[key])
    return config_from_mapping(values, seed=seed, out=out)
