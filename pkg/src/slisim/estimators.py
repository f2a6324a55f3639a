"""Pathwise statistics over simulated loss paths.

All functions are deterministic in the path set. Three observables:

- the terminal-loss pmf with binomial standard errors;
- the Asian payoff max(0, X_T - (1/T)*integral of X - K), computed exactly
  from jump times through the identity
  (1/T)*integral_0^T X_u du = X_T - (1/T)*sum of jump times,
  which holds for unit jumps regardless of the initial level (the initial
  level contributes x0*T to the integral and cancels against x0 in X_T);
- the longest jump-free interval, in two conventions. ``longest_gap`` is the
  maximum gap among the intervals delimited by {0}, the jump times, and T
  (so the whole of [0, T] is covered and the gaps sum to T). The tau
  statistic reported by ``tau_values``/``tau_cdf`` instead takes the longest
  waiting time ending at a jump -- the stretch after the last jump is
  censored -- and equals T for a path that never jumps. The censored
  convention is what the reference tables of P(tau <= u) tabulate; the
  uncensored one covers the horizon and is the natural pathwise functional.
  Both are exposed so either can be cross-checked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError
from .particles import PathRecord

__all__ = [
    "PmfEstimate",
    "ScalarEstimate",
    "marginal_pmf",
    "asian_payoff",
    "longest_gap",
    "gap_lengths",
    "tau_value",
    "tau_values",
    "tau_cdf",
    "tv_distance",
    "step_integral_quadrature",
]


@dataclass(frozen=True)
class PmfEstimate:
    """Empirical pmf over {0..m} with per-entry binomial standard errors."""

    probs: np.ndarray
    stderr: np.ndarray
    n_samples: int


@dataclass(frozen=True)
class ScalarEstimate:
    """A scalar Monte-Carlo estimate with its standard error."""

    value: float
    stderr: float
    n_samples: int

    @property
    def half_width(self) -> float:
        """Two standard errors: the reporting convention for intervals."""
        return 2.0 * self.stderr


def marginal_pmf(paths: Sequence[PathRecord], m: int | None = None) -> PmfEstimate:
    """Empirical distribution of the terminal loss level.

    Args:
        paths: Nonempty collection of path records.
        m: Support upper bound; inferred from the largest terminal level
            when omitted.

    Returns:
        PmfEstimate with probs[k] = #{x_terminal = k}/n and
        stderr[k] = sqrt(p(1-p)/n).

    Raises:
        DomainError: Empty path set, or a terminal level exceeding m.
    """
    if len(paths) == 0:
        raise DomainError("marginal_pmf needs at least one path")
    terminals = np.array([p.x_terminal for p in paths], dtype=np.int64)
    if m is None:
        m = int(terminals.max())
    elif terminals.max() > m:
        raise DomainError(
            f"terminal level {terminals.max()} exceeds m={m}")
    n = len(paths)
    probs = np.bincount(terminals, minlength=m + 1) / n
    stderr = np.sqrt(probs * (1.0 - probs) / n)
    return PmfEstimate(probs=probs, stderr=stderr, n_samples=n)


def asian_payoff(path: PathRecord, strike: float, horizon: float) -> float:
    """Exact Asian payoff max(0, (1/T)*integral_0^T X_u du - K).

    Evaluates max(0, x_terminal - (sum of jump times)/horizon - strike)
    from the jump times alone; no quadrature is involved. math.fsum keeps
    the jump-time sum exactly rounded.
    """
    avg = path.x_terminal - math.fsum(path.jump_times) / horizon
    return max(0.0, avg - strike)


def gap_lengths(path: PathRecord, horizon: float) -> np.ndarray:
    """Lengths of the intervals delimited by {0}, jump times, and horizon."""
    knots = np.empty(len(path.jump_times) + 2)
    knots[0] = 0.0
    knots[1:-1] = path.jump_times
    knots[-1] = horizon
    return np.diff(knots)


def longest_gap(path: PathRecord, horizon: float) -> float:
    """Longest jump-free interval in [0, horizon]; horizon when no jumps."""
    jt = path.jump_times
    if not jt:
        return horizon
    best = jt[0]
    prev = jt[0]
    for t in jt[1:]:
        gap = t - prev
        if gap > best:
            best = gap
        prev = t
    return max(best, horizon - prev)


def tau_value(path: PathRecord, horizon: float) -> float:
    """Longest waiting time between consecutive jumps (first counted from 0).

    The interval after the last jump is censored: a path whose jumps stop
    early does not get credit for the quiet tail. A path with no jumps at
    all has tau = horizon.
    """
    jt = path.jump_times
    if not jt:
        return horizon
    best = jt[0]
    prev = jt[0]
    for t in jt[1:]:
        gap = t - prev
        if gap > best:
            best = gap
        prev = t
    return best


def tau_values(paths: Iterable[PathRecord], horizon: float) -> np.ndarray:
    """tau_value of every path, as an array."""
    return np.array([tau_value(p, horizon) for p in paths])


def tau_cdf(paths: Sequence[PathRecord], thresholds: Sequence[float],
            horizon: float) -> list[ScalarEstimate]:
    """Empirical P(tau <= u) with binomial standard errors, per threshold.

    Report intervals as value +/- 2*stderr (ScalarEstimate.half_width).

    Raises:
        DomainError: Empty path set.
    """
    if len(paths) == 0:
        raise DomainError("tau_cdf needs at least one path")
    taus = tau_values(paths, horizon)
    n = taus.size
    out = []
    for u in thresholds:
        p_hat = float(np.count_nonzero(taus <= u)) / n
        se = math.sqrt(p_hat * (1.0 - p_hat) / n)
        out.append(ScalarEstimate(value=p_hat, stderr=se, n_samples=n))
    return out


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total-variation distance 0.5*sum|p - q| between two pmfs."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DomainError(f"pmf shapes differ: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def step_integral_quadrature(path: PathRecord, horizon: float,
                             points_per_gap: int = 1024) -> float:
    """Brute-force quadrature of (1/T)*integral_0^T X_u du for one path.

    Midpoint rule refined on every jump-free interval, where the path is
    constant, so the only error is float accumulation. This is the
    independent cross-check for the exact jump-time identity used by
    asian_payoff; it is deliberately slow and never used by estimators.
    """
    knots = [0.0] + list(path.jump_times) + [horizon]
    x = path.x_initial
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if b > a:
            # Midpoint rule with many points; the integrand is the constant
            # x on [a, b), so this telescopes to x*(b-a) up to rounding.
            pts = np.linspace(a, b, points_per_gap + 1)
            mids = 0.5 * (pts[:-1] + pts[1:])
            total += float(np.sum(np.full_like(mids, float(x)) * np.diff(pts)))
        x += 1
    return total / horizon
