"""Experiment configuration files: schema, validation, canonical round-trip.

Configs are YAML mappings with a pinned ``schema_version`` and four sections:

    schema_version: 1
    model:                      # portfolio + local intensity + clamp
      m: 125
      lambda_bar: 2.5
      horizon: 1.0
      f: [0.3333333333333333, 3.0]      # optional; defaults to [1/3, 3]
      intensity:                         # optional; defaults to linear-decay
        family: linear-decay             # or piecewise-constant
    factor:                     # stochastic factor (optional; default none)
      kind: cir                 # cir | lognormal-jump | generic | none
      kappa: 1.0
      sigma: 0.3
      y0: 1.0
    engine:
      n: 50000
      d: 100
      algorithm: improved       # improved | naive
      seed: 12345               # 64-bit master seed
      x0: 0                     # optional; or initial_law: [p0..pm]
    experiment:                 # command-specific knobs, all optional
      process: sli              # sli | li
      strike: 1.0
      thresholds: [0.5, 0.25]
      ...

Parsing either returns a fully validated ``ExperimentConfig`` or raises
``ConfigError`` carrying every violation with its field path (``engine.n:
...``). Missing clamp bounds default to [1/3, 3] and are echoed back by
``serialize_config``, so parse -> serialize -> parse is the identity on the
canonical form; ``config_hash`` is a SHA-256 over that canonical form and
deterministically identifies the experiment inputs.

Generic factor coefficients are given as arithmetic expressions in (t, x, y)
evaluated against a numpy-only namespace. Configs are trusted inputs (local
files supplied by the operator), not a sandbox boundary.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import yaml

from .errors import ConfigError, DomainError
from .factor import Cir, FactorDynamics, GenericEuler, LogNormalJump
from .model import (LinearDecayIntensity, LocalIntensity, ModelParams,
                    PiecewiseConstantIntensity, validate_params)

__all__ = [
    "SCHEMA_VERSION",
    "DEFAULT_F",
    "EngineSettings",
    "ExperimentConfig",
    "parse_config",
    "parse_config_dict",
    "serialize_config",
    "config_dict",
    "config_hash",
]

SCHEMA_VERSION = 1
DEFAULT_F = (1.0 / 3.0, 3.0)

_ALGORITHMS = ("improved", "naive")
_PROCESSES = ("sli", "li")
_FACTOR_KINDS = ("cir", "lognormal-jump", "generic", "none")
_ESTIMATOR_NAMES = ("pmf-point", "asian", "tau")

# Names usable inside generic-coefficient expressions, all numpy-vectorized.
_EXPR_NAMES = {
    "abs": np.abs, "sqrt": np.sqrt, "exp": np.exp, "log": np.log,
    "log1p": np.log1p, "expm1": np.expm1, "sin": np.sin, "cos": np.cos,
    "tanh": np.tanh, "minimum": np.minimum, "maximum": np.maximum,
    "where": np.where, "pi": np.pi, "e": np.e,
}


@dataclass(frozen=True)
class EngineSettings:
    """Engine section: particle count, grid, strategy, and master seed."""

    n: int
    d: int
    algorithm: str = "improved"
    seed: int = 0
    x0: int = 0
    initial_law: tuple[float, ...] | None = None


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A parsed, fully validated experiment description.

    ``intensity_section`` and ``factor_section`` retain the canonical
    (defaults-echoed) YAML form of the corresponding typed objects so the
    config can be re-serialized byte-for-byte; equality compares canonical
    forms.
    """

    params: ModelParams
    li: LocalIntensity
    dynamics: FactorDynamics | None
    engine: EngineSettings
    experiment: dict[str, Any]
    intensity_section: dict[str, Any]
    factor_section: dict[str, Any]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return config_dict(self) == config_dict(other)

    def __hash__(self) -> int:
        return hash(config_hash(self))


# ---------------------------------------------------------------------------
# Field-path validation helpers
# ---------------------------------------------------------------------------


class _Check:
    """Accumulates `path: message` failures instead of raising one by one."""

    def __init__(self) -> None:
        self.failures: list[str] = []

    def fail(self, path: str, message: str) -> None:
        self.failures.append(f"{path}: {message}")

    def mapping(self, value: Any, path: str) -> dict:
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail(path, f"expected a mapping, got {type(value).__name__}")
            return {}
        return value

    def int_(self, d: dict, key: str, path: str, *, default=None,
             minimum=None, maximum=None, required: bool = False):
        return self._scalar(d, key, path, (int, np.integer), "an integer",
                            default, minimum, maximum, required, int)

    def float_(self, d: dict, key: str, path: str, *, default=None,
               minimum=None, maximum=None, required: bool = False):
        return self._scalar(d, key, path, (int, float, np.floating),
                            "a number", default, minimum, maximum,
                            required, float)

    def str_(self, d: dict, key: str, path: str, *, default=None,
             choices=None, required: bool = False):
        if key not in d:
            if required:
                self.fail(f"{path}.{key}", "missing required key")
            return default
        v = d[key]
        if not isinstance(v, str):
            self.fail(f"{path}.{key}", f"expected a string, got {v!r}")
            return default
        if choices is not None and v not in choices:
            self.fail(f"{path}.{key}", f"must be one of {list(choices)}, "
                                       f"got {v!r}")
            return default
        return v

    def _scalar(self, d, key, path, types, kind, default, minimum, maximum,
                required, cast):
        if key not in d:
            if required:
                self.fail(f"{path}.{key}", "missing required key")
            return default
        v = d[key]
        # isfinite rejects bare Python ints beyond int64, which are finite.
        finite = isinstance(v, int) or (isinstance(v, types)
                                        and bool(np.isfinite(v)))
        if isinstance(v, bool) or not isinstance(v, types) or not finite:
            self.fail(f"{path}.{key}", f"expected {kind}, got {v!r}")
            return default
        if minimum is not None and v < minimum:
            self.fail(f"{path}.{key}", f"must be >= {minimum}, got {v!r}")
            return default
        if maximum is not None and v > maximum:
            self.fail(f"{path}.{key}", f"must be <= {maximum}, got {v!r}")
            return default
        return cast(v)

    def number_list(self, value, path: str, *, cast=float):
        if not isinstance(value, (list, tuple)) or not value or not all(
                isinstance(v, (int, float, np.integer, np.floating))
                and not isinstance(v, bool) and np.isfinite(v)
                for v in value):
            self.fail(path, f"expected a nonempty list of finite numbers, "
                            f"got {value!r}")
            return None
        return [cast(v) for v in value]


# ---------------------------------------------------------------------------
# Section parsers
# ---------------------------------------------------------------------------


def _parse_model(sec: dict, chk: _Check):
    m = chk.int_(sec, "m", "model", minimum=1, required=True)
    lam = chk.float_(sec, "lambda_bar", "model", minimum=0.0, required=True)
    horizon = chk.float_(sec, "horizon", "model", required=True)
    f = sec.get("f", list(DEFAULT_F))
    f_pair = chk.number_list(f, "model.f")
    if f_pair is not None and len(f_pair) != 2:
        chk.fail("model.f", f"expected [f_low, f_high], got {f!r}")
        f_pair = None
    if f_pair is None:
        f_pair = list(DEFAULT_F)
    known = {"m", "lambda_bar", "horizon", "f", "intensity"}
    for key in sorted(set(sec) - known):
        chk.fail(f"model.{key}", "unknown key")
    if m is None or lam is None or horizon is None:
        return None, None, {}
    params = ModelParams(m=m, lambda_bar=lam, f_low=f_pair[0],
                         f_high=f_pair[1], horizon=horizon)

    isec = chk.mapping(sec.get("intensity"), "model.intensity")
    family = chk.str_(isec, "family", "model.intensity", default="linear-decay",
                      choices=("linear-decay", "piecewise-constant"))
    li = None
    if family == "linear-decay":
        intensity_section = {"family": "linear-decay"}
        for key in sorted(set(isec) - {"family"}):
            chk.fail(f"model.intensity.{key}", "unknown key")
        try:
            li = LinearDecayIntensity(lambda_bar=lam, m=m)
        except DomainError as exc:
            chk.fail("model.intensity", str(exc))
    else:
        bps = chk.number_list(isec.get("breakpoints"),
                              "model.intensity.breakpoints")
        rows = isec.get("values")
        table = None
        if isinstance(rows, list) and rows and all(
                isinstance(r, list) for r in rows):
            table = [chk.number_list(r, f"model.intensity.values[{k}]")
                     for k, r in enumerate(rows)]
        else:
            chk.fail("model.intensity.values",
                     f"expected a list of rate rows, got {rows!r}")
        for key in sorted(set(isec) - {"family", "breakpoints", "values"}):
            chk.fail(f"model.intensity.{key}", "unknown key")
        intensity_section = {"family": "piecewise-constant",
                             "breakpoints": bps, "values": table}
        if bps is not None and table is not None and all(
                r is not None for r in table):
            try:
                li = PiecewiseConstantIntensity(
                    breakpoints=tuple(bps),
                    values=np.asarray(table, dtype=float), m=m)
            except (DomainError, ValueError) as exc:
                chk.fail("model.intensity", str(exc))
    return params, li, intensity_section


class _ExprFn:
    """A compiled (t, x, y) expression; picklable so worker pools can use it."""

    def __init__(self, text: str, path: str) -> None:
        self.text = text
        self.path = path
        self._code = compile(text, f"<config:{path}>", "eval")
        self._names = _EXPR_NAMES | {"__builtins__": {}}

    def __call__(self, t, x, y):
        return eval(self._code, self._names, {"t": t, "x": x, "y": y})

    def __getstate__(self):
        return (self.text, self.path)

    def __setstate__(self, state) -> None:
        self.__init__(*state)


def _compile_expr(text: str, path: str, y0: float, chk: _Check) -> Callable:
    """Compile an arithmetic (t, x, y) expression against numpy names."""
    try:
        fn = _ExprFn(text, path)
    except SyntaxError as exc:
        chk.fail(path, f"invalid expression: {exc.msg}")
        return lambda t, x, y: 0.0
    try:
        float(np.asarray(fn(0.0, 0, y0), dtype=float))
    except Exception as exc:  # malformed names/ops surface at parse time
        chk.fail(path, f"expression failed on (0, 0, y0): {exc}")
    return fn


def _parse_factor(sec: dict, chk: _Check):
    kind = chk.str_(sec, "kind", "factor", default="none",
                    choices=_FACTOR_KINDS)
    if kind in (None, "none"):
        for key in sorted(set(sec) - {"kind"}):
            chk.fail(f"factor.{key}", "unknown key")
        return None, {"kind": "none"}
    dynamics = None
    if kind == "cir":
        kappa = chk.float_(sec, "kappa", "factor", minimum=0.0, required=True)
        sigma = chk.float_(sec, "sigma", "factor", minimum=0.0, required=True)
        y0 = chk.float_(sec, "y0", "factor", required=True)
        scheme = chk.str_(sec, "scheme", "factor", default="second-order",
                          choices=("second-order", "exact"))
        known = {"kind", "kappa", "sigma", "y0", "scheme"}
        section = {"kind": kind, "kappa": kappa, "sigma": sigma, "y0": y0,
                   "scheme": scheme}
        if None not in (kappa, sigma, y0, scheme):
            try:
                dynamics = Cir(kappa=kappa, sigma=sigma, y0=y0, scheme=scheme)
            except DomainError as exc:
                chk.fail("factor", str(exc))
    elif kind == "lognormal-jump":
        a = chk.float_(sec, "a", "factor", minimum=0.0, required=True)
        sigma = chk.float_(sec, "sigma", "factor", minimum=0.0, required=True)
        gamma = chk.float_(sec, "gamma", "factor", minimum=0.0, required=True)
        y0 = chk.float_(sec, "y0", "factor", required=True)
        mode = chk.str_(sec, "drift_mode", "factor", default="ito",
                        choices=("ito", "paper-ou-drift"))
        known = {"kind", "a", "sigma", "gamma", "y0", "drift_mode"}
        section = {"kind": kind, "a": a, "sigma": sigma, "gamma": gamma,
                   "y0": y0, "drift_mode": mode}
        if None not in (a, sigma, gamma, y0, mode):
            try:
                dynamics = LogNormalJump(a=a, sigma=sigma, gamma=gamma, y0=y0,
                                         drift_mode=mode)
            except DomainError as exc:
                chk.fail("factor", str(exc))
    else:  # generic
        y0 = chk.float_(sec, "y0", "factor", required=True)
        exprs = {}
        for name in ("drift", "vol", "jump"):
            exprs[name] = chk.str_(sec, name, "factor", required=True)
        known = {"kind", "drift", "vol", "jump", "y0"}
        section = {"kind": kind, "y0": y0, **exprs}
        if y0 is not None and y0 > 0 and all(
                v is not None for v in exprs.values()):
            fns = {name: _compile_expr(text, f"factor.{name}", y0, chk)
                   for name, text in exprs.items()}
            if not chk.failures:
                dynamics = GenericEuler(drift=fns["drift"], vol=fns["vol"],
                                        jump=fns["jump"], y0=y0)
        elif y0 is not None and not y0 > 0:
            chk.fail("factor.y0", f"must be > 0, got {y0!r}")
    for key in sorted(set(sec) - known):
        chk.fail(f"factor.{key}", "unknown key")
    return dynamics, section


def _parse_engine(sec: dict, m: int | None, chk: _Check):
    n = chk.int_(sec, "n", "engine", minimum=1, required=True)
    d = chk.int_(sec, "d", "engine", minimum=1, required=True)
    algorithm = chk.str_(sec, "algorithm", "engine", default="improved",
                         choices=_ALGORITHMS)
    seed = chk.int_(sec, "seed", "engine", default=0, minimum=0,
                    maximum=2 ** 64 - 1)
    x0 = chk.int_(sec, "x0", "engine", default=0, minimum=0)
    if m is not None and x0 is not None and x0 > m:
        chk.fail("engine.x0", f"must be <= m={m}, got {x0}")
    law = None
    if "initial_law" in sec:
        vals = chk.number_list(sec["initial_law"], "engine.initial_law")
        if vals is not None:
            if m is not None and len(vals) != m + 1:
                chk.fail("engine.initial_law",
                         f"expected m+1={m + 1} entries, got {len(vals)}")
            elif min(vals) < 0 or abs(sum(vals) - 1.0) > 1e-12:
                chk.fail("engine.initial_law",
                         "entries must be >= 0 and sum to 1")
            else:
                law = tuple(vals)
    known = {"n", "d", "algorithm", "seed", "x0", "initial_law"}
    for key in sorted(set(sec) - known):
        chk.fail(f"engine.{key}", "unknown key")
    if n is None or d is None:
        return None
    return EngineSettings(n=n, d=d, algorithm=algorithm or "improved",
                          seed=seed if seed is not None else 0,
                          x0=x0 if x0 is not None else 0, initial_law=law)


def _parse_experiment(sec: dict, chk: _Check) -> dict[str, Any]:
    out: dict[str, Any] = {}
    spec: dict[str, Callable] = {
        "process": lambda v, p: chk.str_(sec, "process", "experiment",
                                         choices=_PROCESSES),
        "strike": lambda v, p: chk.float_(sec, "strike", "experiment",
                                          minimum=0.0),
        "level": lambda v, p: chk.int_(sec, "level", "experiment", minimum=0),
        "thresholds": lambda v, p: chk.number_list(v, p),
        "n_values": lambda v, p: _int_grid(v, p, chk),
        "reps_per_n": lambda v, p: chk.int_(sec, "reps_per_n", "experiment",
                                            minimum=2),
        "reference_n": lambda v, p: chk.int_(sec, "reference_n", "experiment",
                                             minimum=1),
        "reference_reps": lambda v, p: chk.int_(sec, "reference_reps",
                                                "experiment", minimum=2),
        "estimators": lambda v, p: _estimator_names(v, p, chk),
        "clt_systems": lambda v, p: chk.int_(sec, "clt_systems", "experiment",
                                             minimum=100),
        "bench_n": lambda v, p: chk.int_(sec, "bench_n", "experiment",
                                         minimum=2),
        "bench_grid": lambda v, p: _int_grid(v, p, chk),
        "fp": lambda v, p: _fp_section(v, p, chk),
    }
    for key in sorted(sec):
        if key not in spec:
            chk.fail(f"experiment.{key}", "unknown key")
            continue
        val = spec[key](sec[key], f"experiment.{key}")
        if val is not None:
            out[key] = val
    return out


def _int_grid(value, path: str, chk: _Check):
    vals = chk.number_list(value, path, cast=int)
    if vals is None:
        return None
    if any(v != float(w) for v, w in zip(vals, value)) or any(
            b <= a for a, b in zip(vals, vals[1:])) or vals[0] < 1:
        chk.fail(path, f"expected strictly increasing positive integers, "
                       f"got {value!r}")
        return None
    return vals


def _estimator_names(value, path: str, chk: _Check):
    if not isinstance(value, list) or not value or not all(
            isinstance(v, str) and v in _ESTIMATOR_NAMES for v in value):
        chk.fail(path, f"expected a nonempty sublist of "
                       f"{list(_ESTIMATOR_NAMES)}, got {value!r}")
        return None
    return list(value)


def _fp_section(value, path: str, chk: _Check):
    sec = chk.mapping(value, path)
    out: dict[str, Any] = {}
    rates = sec.get("rates")
    ok_shape = (isinstance(rates, list) and rates
                and all(isinstance(lvl, list) and lvl for lvl in rates)
                and all(isinstance(row, list) for lvl in rates for row in lvl))
    if not ok_shape:
        chk.fail(f"{path}.rates",
                 "expected rates[level][from][to] as nested lists")
    else:
        out["rates"] = [[[float(v) for v in row] for row in lvl]
                        for lvl in rates]
    fv = chk.number_list(sec.get("f_values"), f"{path}.f_values")
    if fv is not None:
        out["f_values"] = fv
    out["dt"] = chk.float_(sec, "dt", path, required=True)
    out["y0"] = chk.int_(sec, "y0", path, default=0, minimum=0)
    out["ctmc_paths"] = chk.int_(sec, "ctmc_paths", path, default=0, minimum=0)
    known = {"rates", "f_values", "dt", "y0", "ctmc_paths"}
    for key in sorted(set(sec) - known):
        chk.fail(f"{path}.{key}", "unknown key")
    if out.get("dt") is not None and not out["dt"] > 0:
        chk.fail(f"{path}.dt", f"must be > 0, got {out['dt']!r}")
    return out if not chk.failures else None


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def parse_config_dict(data: dict) -> ExperimentConfig:
    """Validate a loaded YAML mapping into an ExperimentConfig.

    Raises:
        ConfigError: listing every schema/semantic violation with its field
            path (``engine.n: must be >= 1, got -3``).
    """
    chk = _Check()
    if not isinstance(data, dict):
        raise ConfigError("config validation failed",
                          ["config: top level must be a mapping"])
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        chk.fail("schema_version",
                 f"expected {SCHEMA_VERSION}, got {version!r}")
    known = {"schema_version", "model", "factor", "engine", "experiment"}
    for key in sorted(set(data) - known):
        chk.fail(key, "unknown section")

    params, li, intensity_section = _parse_model(
        chk.mapping(data.get("model"), "model"), chk)
    dynamics, factor_section = _parse_factor(
        chk.mapping(data.get("factor"), "factor"), chk)
    engine = _parse_engine(chk.mapping(data.get("engine"), "engine"),
                           params.m if params else None, chk)
    experiment = _parse_experiment(
        chk.mapping(data.get("experiment"), "experiment"), chk)

    if params is not None and li is not None:
        for msg in validate_params(params, li).failures:
            chk.fail("model", msg)
    if experiment.get("process", "sli") == "sli" and dynamics is None \
            and not chk.failures:
        chk.fail("factor.kind", "an sli experiment needs a stochastic factor")

    if chk.failures:
        raise ConfigError("config validation failed", chk.failures)
    return ExperimentConfig(params=params, li=li, dynamics=dynamics,
                            engine=engine, experiment=experiment,
                            intensity_section=intensity_section,
                            factor_section=factor_section)


def parse_config(path) -> ExperimentConfig:
    """Load and validate a YAML config file (see parse_config_dict)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return parse_config_dict(data)


def config_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """Canonical plain-data form of a config (defaults echoed), for
    serialization, hashing, and equality."""
    engine: dict[str, Any] = {
        "n": cfg.engine.n, "d": cfg.engine.d,
        "algorithm": cfg.engine.algorithm, "seed": cfg.engine.seed,
        "x0": cfg.engine.x0,
    }
    if cfg.engine.initial_law is not None:
        engine["initial_law"] = list(cfg.engine.initial_law)
    return {
        "schema_version": SCHEMA_VERSION,
        "model": {
            "m": cfg.params.m,
            "lambda_bar": cfg.params.lambda_bar,
            "horizon": cfg.params.horizon,
            "f": [cfg.params.f_low, cfg.params.f_high],
            "intensity": cfg.intensity_section,
        },
        "factor": cfg.factor_section,
        "engine": engine,
        "experiment": {k: cfg.experiment[k] for k in sorted(cfg.experiment)},
    }


def serialize_config(cfg: ExperimentConfig) -> str:
    """YAML text of the canonical form; parse(serialize(c)) == c."""
    return yaml.safe_dump(config_dict(cfg), sort_keys=True,
                          default_flow_style=False)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 hex digest of the canonical form (sorted-key JSON)."""
    payload = json.dumps(config_dict(cfg), sort_keys=True,
                         separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
