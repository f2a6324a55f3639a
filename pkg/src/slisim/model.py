"""Core model objects: portfolio parameters, local intensity, clamp function.

The loss process X lives on the level set {0..m}. Its baseline jump rate is a
local intensity lambda(t, x) >= 0 with lambda(t, m) = 0 (no jumps once the
whole portfolio has defaulted) and, per level, right-continuous step behaviour
in t. Two families are provided:

- ``LinearDecayIntensity``: lambda(t, x) = lambda_bar * (1 - x/m), constant in
  time, the family used by every built-in experiment.
- ``PiecewiseConstantIntensity``: a user table of per-level step functions,
  the simplest class that realises cadlag time dependence exactly and makes
  left limits computable.

The factor-coupling function f is the two-sided clamp
f(y) = min(max(y, f_low), f_high), which keeps every jump-rate ratio bounded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = [
    "ModelParams",
    "LocalIntensity",
    "LinearDecayIntensity",
    "PiecewiseConstantIntensity",
    "ClampF",
    "ValidationReport",
    "eval_lambda",
    "eval_lambda_left",
    "eval_f",
    "validate_params",
]


@dataclass(frozen=True)
class ModelParams:
    """Static model parameters.

    Args:
        m: Portfolio size (number of defaultable entities), positive integer.
        lambda_bar: Upper bound on the local intensity over [0, horizon] x
            {0..m}; also the thinning rate scale. Supplied explicitly and
            validated as a true bound (thinning correctness requires one).
        f_low: Lower clamp bound, strictly positive.
        f_high: Upper clamp bound, >= f_low.
        horizon: Time horizon T > 0.
    """

    m: int
    lambda_bar: float
    f_low: float
    f_high: float
    horizon: float

    def clamp(self) -> "ClampF":
        """The clamp function induced by (f_low, f_high)."""
        return ClampF(self.f_low, self.f_high)


class LocalIntensity:
    """Base class for local-intensity families lambda(t, x).

    Subclasses must provide ``value(t, x)`` (right-continuous in t),
    ``left_value(t, x)`` (left limit, equal to ``value`` away from
    breakpoints), ``sup_value()`` and the level count ``m``. Instances are
    immutable after construction and safe to share across threads.
    """

    m: int

    def value(self, t: float, x: int) -> float:
        raise NotImplementedError

    def left_value(self, t: float, x: int) -> float:
        raise NotImplementedError

    def sup_value(self) -> float:
        """sup over t >= 0, x in {0..m} of lambda(t, x)."""
        raise NotImplementedError

    @property
    def time_constant(self) -> bool:
        """True when lambda does not depend on t (enables fast paths)."""
        return False

    def level_values(self, t: float) -> np.ndarray:
        """Vector (lambda(t, x))_{x=0..m}; generic fallback loops levels."""
        return np.array([self.value(t, x) for x in range(self.m + 1)])

    def values_at(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Elementwise lambda(t_i, x_i); generic fallback loops entries."""
        return np.array([self.value(float(ti), int(xi))
                         for ti, xi in zip(np.ravel(t), np.ravel(x))])

    def _check_args(self, t: float, x: int, horizon: float | None) -> None:
        if x < 0 or x > self.m or int(x) != x:
            raise DomainError(f"loss level x={x} outside {{0..{self.m}}}")
        if t < 0:
            raise DomainError(f"time t={t} is negative")
        if horizon is not None and t > horizon:
            raise DomainError(f"time t={t} exceeds horizon {horizon}")


@dataclass(frozen=True)
class LinearDecayIntensity(LocalIntensity):
    """lambda(t, x) = lambda_bar * (1 - x/m), constant in time.

    Under this family the loss process of the baseline model counts
    independent defaults arriving at rate lambda_bar/m per name, which is what
    makes the closed-form binomial marginal available.
    """

    lambda_bar: float
    m: int

    def __post_init__(self):
        if self.lambda_bar < 0:
            raise DomainError("lambda_bar must be >= 0")
        if self.m < 1:
            raise DomainError("m must be >= 1")

    def value(self, t: float, x: int) -> float:
        self._check_args(t, x, None)
        if x == self.m:
            return 0.0
        return self.lambda_bar * (1.0 - x / self.m)

    def left_value(self, t: float, x: int) -> float:
        return self.value(t, x)

    def sup_value(self) -> float:
        return self.lambda_bar

    @property
    def time_constant(self) -> bool:
        return True

    def level_values(self, t: float = 0.0) -> np.ndarray:
        out = self.lambda_bar * (1.0 - np.arange(self.m + 1) / self.m)
        out[self.m] = 0.0
        return out

    def values_at(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        # x/m == 1.0 exactly at x == m, so the top level gets exactly 0.
        return self.lambda_bar * (1.0 - np.asarray(x) / self.m)


@dataclass(frozen=True)
class PiecewiseConstantIntensity(LocalIntensity):
    """Per-level step functions of time: lambda(t, x) = values[k(t), x].

    ``breakpoints`` are strictly increasing times starting at 0;
    ``values[k, x]`` applies on the half-open interval
    [breakpoints[k], breakpoints[k+1]) (the last one extends to +inf), so the
    representation is right-continuous with left limits by construction.

    Raises:
        DomainError: if the table shape is inconsistent, breakpoints are not
            strictly increasing from 0, any rate is negative, or any row has
            lambda(., m) != 0.
    """

    breakpoints: tuple[float, ...]
    values: np.ndarray = field(repr=False)  # shape (len(breakpoints), m+1)
    m: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        bps = np.asarray(self.breakpoints, dtype=float)
        object.__setattr__(self, "breakpoints", tuple(bps.tolist()))
        if bps.ndim != 1 or bps.size == 0 or bps[0] != 0.0:
            raise DomainError("breakpoints must start at t=0")
        if bps.size > 1 and not np.all(np.diff(bps) > 0):
            raise DomainError("breakpoints must be strictly increasing")
        if vals.shape != (bps.size, self.m + 1):
            raise DomainError(
                f"values shape {vals.shape} != (n_breakpoints, m+1) = "
                f"({bps.size}, {self.m + 1})"
            )
        if np.any(vals < 0):
            raise DomainError("intensity table has negative entries")
        if np.any(vals[:, self.m] != 0.0):
            raise DomainError("lambda(., m) must be identically 0")
        object.__setattr__(self, "_bps", bps)

    def _interval(self, t: float) -> int:
        # Index k with breakpoints[k] <= t < breakpoints[k+1].
        return int(np.searchsorted(self.breakpoints, t, side="right")) - 1

    def value(self, t: float, x: int) -> float:
        self._check_args(t, x, None)
        return float(self.values[self._interval(t), x])

    def left_value(self, t: float, x: int) -> float:
        self._check_args(t, x, None)
        # Left limit: the interval strictly containing times < t. At an exact
        # breakpoint this is the previous interval; at t=0 we use the first.
        k = int(np.searchsorted(self.breakpoints, t, side="left")) - 1
        return float(self.values[max(k, 0), x])

    def sup_value(self) -> float:
        return float(self.values.max())

    def level_values(self, t: float) -> np.ndarray:
        return self.values[self._interval(t)].copy()

    def values_at(self, t: np.ndarray, x: np.ndarray) -> np.ndarray:
        rows = np.searchsorted(self._bps, np.asarray(t), side="right") - 1
        return self.values[np.maximum(rows, 0), np.asarray(x)]


@dataclass(frozen=True)
class ClampF:
    """Two-sided clamp f(y) = min(max(y, f_low), f_high).

    Continuous, nondecreasing, idempotent, with f_low <= f(y) <= f_high for
    every real y. This is the only coupling function exercised by the built-in
    experiments; any other bounded continuous f can be passed to the engines
    as a plain callable honouring the same bounds.
    """

    f_low: float
    f_high: float

    def __post_init__(self):
        if not (0 < self.f_low <= self.f_high < np.inf):
            raise DomainError(
                f"clamp bounds must satisfy 0 < f_low <= f_high < inf, "
                f"got ({self.f_low}, {self.f_high})"
            )

    def __call__(self, y):
        if isinstance(y, np.ndarray):
            return np.clip(y, self.f_low, self.f_high)
        return min(max(y, self.f_low), self.f_high)


def eval_lambda(li: LocalIntensity, t: float, x: int, horizon: float | None = None) -> float:
    """Evaluate lambda(t, x) (right-continuous version).

    Args:
        li: Intensity family.
        t: Time, 0 <= t (<= horizon when given).
        x: Loss level in {0..li.m}.
        horizon: Optional upper bound on t to enforce.

    Returns:
        lambda(t, x) >= 0; exactly 0 when x == li.m.

    Raises:
        DomainError: t or x outside the admissible range.
    """
    li._check_args(t, x, horizon)
    return li.value(t, x)


def eval_lambda_left(li: LocalIntensity, t: float, x: int) -> float:
    """Evaluate the left limit lambda(t-, x)."""
    return li.left_value(t, x)


def eval_f(c: ClampF, y: float) -> float:
    """Evaluate the clamp at y (scalar or array)."""
    return c(y)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validate_params: ok flag plus named assumption failures."""

    failures: tuple[str, ...]

    @property
    def valid(self) -> bool:
        return not self.failures

    def __bool__(self) -> bool:
        return self.valid


def validate_params(p: ModelParams, li: LocalIntensity) -> ValidationReport:
    """Check every standing assumption the engines rely on.

    Never raises: each violated assumption is reported by name so configs can
    surface all problems at once.
    """
    fails: list[str] = []
    if not (isinstance(p.m, (int, np.integer)) and p.m >= 1):
        fails.append(f"portfolio-size: m must be an integer >= 1, got {p.m!r}")
    if not (np.isfinite(p.horizon) and p.horizon > 0):
        fails.append(f"horizon: T must be finite and > 0, got {p.horizon!r}")
    if not (np.isfinite(p.f_low) and p.f_low > 0):
        fails.append(f"clamp-lower: f_low must be > 0, got {p.f_low!r}")
    if not (np.isfinite(p.f_high) and p.f_high >= p.f_low):
        fails.append(
            f"clamp-order: need 0 < f_low <= f_high < inf, got "
            f"({p.f_low!r}, {p.f_high!r})"
        )
    if not (np.isfinite(p.lambda_bar) and p.lambda_bar >= 0):
        fails.append(f"intensity-bound: lambda_bar must be >= 0, got {p.lambda_bar!r}")

    if li.m != p.m:
        fails.append(f"level-count: intensity has m={li.m} but params have m={p.m}")
    else:
        sup = li.sup_value()
        if np.isfinite(p.lambda_bar) and sup > p.lambda_bar:
            fails.append(
                f"intensity-bound: sup lambda = {sup} exceeds lambda_bar = "
                f"{p.lambda_bar}"
            )
        # lambda(., m) = 0 is structural for both built-in families but is
        # re-checked here for user-supplied tables and subclasses.
        try:
            ts = _probe_times(li, p.horizon)
            for t in ts:
                if li.value(t, p.m) != 0.0:
                    fails.append(f"absorbing-top: lambda({t}, m) != 0")
                    break
                if np.any(li.level_values(t) < 0):
                    fails.append(f"nonnegative-rate: lambda({t}, .) has entries < 0")
                    break
        except DomainError as exc:  # pragma: no cover - defensive
            fails.append(f"intensity-eval: {exc}")
    return ValidationReport(tuple(fails))


def _probe_times(li: LocalIntensity, horizon: float) -> list[float]:
    """Times at which table-style assumptions are probed exhaustively."""
    if isinstance(li, PiecewiseConstantIntensity):
        return [b for b in li.breakpoints if b <= horizon] + [horizon]
    if li.time_constant:
        return [0.0]
    return list(np.linspace(0.0, horizon, 17))
