"""Factor-process dynamics: steppers between loss jumps and the jump map.

Three dynamics are supported:

- ``Cir``: dY = kappa*(theta - Y)dt + sigma*sqrt(Y)dW with drift target
  theta = lambda(t, x) frozen at each step's left endpoint (exact for the
  piecewise-constant intensity families). Default stepper is a
  positivity-preserving weak-second-order scheme; an exact conditional-law
  mode (noncentral chi-square via Poisson-Gamma mixture) serves as oracle.
- ``LogNormalJump``: dY = -a*Y*log(Y)dt + sigma*Y*dW + gamma*Y dX, advanced
  by Euler steps on Z = log Y, plus the multiplicative jump Y -> Y(1+gamma).
- ``GenericEuler``: dY = b dt + v dW + jump dX with user coefficients,
  advanced by plain Euler (no positivity guarantee).

The second-order CIR scheme uses exactly one standard normal per step. With
psi_k(u) = (1 - exp(-k*u))/k and c2 = (a - sigma^2/4)*psi_k(h/2):

- if c2 >= 0 (sigma^2 <= 4a), the squared-Gaussian step
  Y' = e^{-kh/2}*(sqrt(c2 + e^{-kh/2} Y) + (sigma/2)sqrt(h) Z)^2 + c2
  is well defined and positive for every draw;
- otherwise, when Y is large enough that the same formula stays positive for
  the bounded three-point variable zeta = sqrt(3)*xi (xi in {-1,0,1} with
  probabilities 1/6, 2/3, 1/6, matching five normal moments), Z is mapped to
  zeta through its own quantiles;
- otherwise a two-point variable matching the exact conditional mean and
  variance is sampled through Phi(Z).

All branches therefore consume the single draw Z, so stream accounting is
identical regardless of the branch taken.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.random import Generator
from scipy.special import ndtr, ndtri

from .errors import DomainError
from .model import LocalIntensity

__all__ = [
    "Cir",
    "LogNormalJump",
    "GenericEuler",
    "FactorDynamics",
    "FactorState",
    "step_cir",
    "step_lognormal",
    "step_generic",
    "apply_jump",
    "cir_mean",
    "cir_variance",
    "cir_step_values",
    "cir_exact_values",
    "lognormal_z_step",
    "make_stepper",
]

_SQRT3 = math.sqrt(3.0)
_Q16 = float(ndtri(1.0 / 6.0))
_Q56 = -_Q16
# Positivity floor: keeps stepper outputs strictly positive even when the
# scheme's exact value underflows to 0.0 (denormal territory, never reached
# at realistic parameters).
_POS_FLOOR = 1e-300


@dataclass(frozen=True)
class Cir:
    """Square-root diffusion whose drift target is the local intensity.

    Args:
        kappa: Mean-reversion rate, >= 0.
        sigma: Volatility, >= 0.
        y0: Initial factor value, > 0.
        scheme: "second-order" (default) or "exact" (conditional-law
            sampling; used as a test oracle, not accepted by the particle
            engine because its draw count per step is itself random).
    """

    kappa: float
    sigma: float
    y0: float
    scheme: str = "second-order"

    def __post_init__(self) -> None:
        if not self.y0 > 0.0:
            raise DomainError(f"y0 must be > 0, got {self.y0}")
        if self.kappa < 0.0 or self.sigma < 0.0:
            raise DomainError("kappa and sigma must be >= 0")
        if self.scheme not in ("second-order", "exact"):
            raise DomainError(f"unknown CIR scheme {self.scheme!r}")


@dataclass(frozen=True)
class LogNormalJump:
    """Log-normal factor with mean reversion of log Y and upward jumps.

    Args:
        a: Mean-reversion rate of Z = log Y, >= 0.
        sigma: Volatility, >= 0.
        gamma: Jump multiplier, >= 0; Y -> Y(1+gamma) at each loss jump.
        y0: Initial factor value, > 0.
        drift_mode: "ito" (default) uses the Ito-consistent constant drift
            -sigma^2/2 on Z; "paper-ou-drift" uses +sigma^2/2.
    """

    a: float
    sigma: float
    gamma: float
    y0: float
    drift_mode: str = "ito"

    def __post_init__(self) -> None:
        if not self.y0 > 0.0:
            raise DomainError(f"y0 must be > 0, got {self.y0}")
        if self.a < 0.0 or self.sigma < 0.0:
            raise DomainError("a and sigma must be >= 0")
        if self.gamma < 0.0:
            raise DomainError(f"gamma must be >= 0, got {self.gamma}")
        if self.drift_mode not in ("ito", "paper-ou-drift"):
            raise DomainError(f"unknown drift_mode {self.drift_mode!r}")

    @property
    def z_drift_const(self) -> float:
        """Constant term of the Z drift (-a*Z + const)."""
        half = 0.5 * self.sigma * self.sigma
        return -half if self.drift_mode == "ito" else half


@dataclass(frozen=True)
class GenericEuler:
    """User-supplied coefficients, advanced by explicit Euler steps.

    The callables receive (t, x, y) and must broadcast over numpy arrays.
    Sub-linear growth in y is a documented precondition, not verified.
    """

    drift: Callable
    vol: Callable
    jump: Callable
    y0: float

    def __post_init__(self) -> None:
        if not self.y0 > 0.0:
            raise DomainError(f"y0 must be > 0, got {self.y0}")


FactorDynamics = Cir | LogNormalJump | GenericEuler


@dataclass(frozen=True)
class FactorState:
    """One particle's factor value and the time it was last updated."""

    y: float
    t_last: float


# ---------------------------------------------------------------------------
# CIR kernels
# ---------------------------------------------------------------------------

_PSI_SERIES_CUT = 1e-8


def _psi_vec(kappa: float, u: np.ndarray) -> np.ndarray:
    """(1 - exp(-kappa*u))/kappa, series u*(1 - kappa*u/2) for tiny kappa*u.

    The series branch is not just the kappa = 0 limit: for subnormal kappa
    the product kappa*u can underflow to 0 inside expm1 while kappa itself
    divides cleanly, collapsing the quotient to 0 where the true value
    is ~u.  Below the cut the omitted terms are < 1e-17 relative.
    """
    u = np.asarray(u, dtype=float)
    w = kappa * u
    small = w < _PSI_SERIES_CUT
    if kappa == 0.0 or small.all():
        return u * (1.0 - 0.5 * w)
    return np.where(small, u * (1.0 - 0.5 * w), -np.expm1(-w) / kappa)


def _psi_one(kappa: float, u: float) -> float:
    """Scalar mirror of _psi_vec."""
    w = kappa * u
    if w < _PSI_SERIES_CUT:
        return u * (1.0 - 0.5 * w)
    return -math.expm1(-w) / kappa


def cir_mean(y, a: float | np.ndarray, kappa: float, h) -> float | np.ndarray:
    """Exact conditional mean y*e^{-kappa h} + a*psi_kappa(h)."""
    h = np.asarray(h, dtype=float)
    return y * np.exp(-kappa * h) + a * _psi_vec(kappa, h)


def cir_variance(y, a, kappa: float, sigma: float, h):
    """Exact conditional variance sigma^2*(y*e^{-kh}*psi(h) + a*psi(h)^2/2)."""
    h = np.asarray(h, dtype=float)
    ekh = np.exp(-kappa * h)
    psih = _psi_vec(kappa, h)
    return sigma * sigma * (y * ekh * psih + 0.5 * a * psih * psih)


def cir_step_values(y: np.ndarray, a: np.ndarray, kappa: float, sigma: float,
                    h: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Second-order scheme, vectorized; one normal draw z per entry.

    Args:
        y: Current values, > 0.
        a: Drift level kappa*theta per entry (theta frozen on the step).
        kappa: Mean-reversion rate (scalar).
        sigma: Volatility (scalar, may be 0).
        h: Step sizes, >= 0.
        z: Standard normal draws (consumed even where a branch ignores them).

    Returns:
        New values, strictly positive.
    """
    y = np.asarray(y, dtype=float)
    a = np.broadcast_to(np.asarray(a, dtype=float), y.shape)
    h = np.broadcast_to(np.asarray(h, dtype=float), y.shape)
    if sigma == 0.0:
        ekh = np.exp(-kappa * h)
        return np.maximum(y * ekh + a * _psi_vec(kappa, h), _POS_FLOOR)
    z = np.asarray(z, dtype=float)
    ekh2 = np.exp(-0.5 * kappa * h)
    psi2 = _psi_vec(kappa, 0.5 * h)
    c2 = (a - 0.25 * sigma * sigma) * psi2
    sq = c2 + ekh2 * y
    s = np.sqrt(np.maximum(sq, 0.0))
    out = np.empty_like(y)
    gauss = c2 >= 0.0
    if gauss.any():
        out[gauss] = (ekh2[gauss]
                      * (s[gauss] + (0.5 * sigma) * np.sqrt(h[gauss]) * z[gauss]) ** 2
                      + c2[gauss])
    rest = ~gauss
    if rest.any():
        thr = (0.5 * sigma) * np.sqrt(3.0 * h) + np.sqrt(-np.minimum(c2, 0.0) / ekh2)
        bounded = rest & (sq >= 0.0) & (s >= thr)
        if bounded.any():
            zb = z[bounded]
            zeta = np.where(zb < _Q16, -_SQRT3, np.where(zb > _Q56, _SQRT3, 0.0))
            out[bounded] = (ekh2[bounded]
                            * (s[bounded] + (0.5 * sigma) * np.sqrt(h[bounded]) * zeta) ** 2
                            + c2[bounded])
        two = rest & ~bounded
        if two.any():
            yt, at, ht = y[two], a[two], h[two]
            ekh = np.exp(-kappa * ht)
            psih = _psi_vec(kappa, ht)
            u1 = yt * ekh + at * psih
            var = sigma * sigma * (yt * ekh * psih + 0.5 * at * psih * psih)
            u2 = u1 * u1 + var
            pi = 0.5 * (1.0 - np.sqrt(np.maximum(1.0 - u1 * u1 / u2, 0.0)))
            pi_safe = np.maximum(pi, _POS_FLOOR)
            with np.errstate(over="ignore"):
                out[two] = np.where(ndtr(z[two]) < pi,
                                    u1 / (2.0 * pi_safe),
                                    u1 / (2.0 * (1.0 - pi)))
    return np.maximum(out, _POS_FLOOR)


def _cir_step_one(y: float, a: float, kappa: float, sigma: float,
                  h: float, z: float) -> float:
    """Scalar mirror of cir_step_values (same branches and formulas)."""
    if sigma == 0.0:
        ekh = math.exp(-kappa * h)
        return max(y * ekh + a * _psi_one(kappa, h), _POS_FLOOR)
    ekh2 = math.exp(-0.5 * kappa * h)
    psi2 = _psi_one(kappa, 0.5 * h)
    c2 = (a - 0.25 * sigma * sigma) * psi2
    sq = c2 + ekh2 * y
    s = math.sqrt(sq) if sq > 0.0 else 0.0
    if c2 >= 0.0:
        out = ekh2 * (s + (0.5 * sigma) * math.sqrt(h) * z) ** 2 + c2
        return max(out, _POS_FLOOR)
    thr = (0.5 * sigma) * math.sqrt(3.0 * h) + math.sqrt(-c2 / ekh2)
    if sq >= 0.0 and s >= thr:
        zeta = -_SQRT3 if z < _Q16 else (_SQRT3 if z > _Q56 else 0.0)
        out = ekh2 * (s + (0.5 * sigma) * math.sqrt(h) * zeta) ** 2 + c2
        return max(out, _POS_FLOOR)
    ekh = math.exp(-kappa * h)
    psih = _psi_one(kappa, h)
    u1 = y * ekh + a * psih
    var = sigma * sigma * (y * ekh * psih + 0.5 * a * psih * psih)
    u2 = u1 * u1 + var
    pi = 0.5 * (1.0 - math.sqrt(max(1.0 - u1 * u1 / u2, 0.0)))
    if float(ndtr(z)) < pi:
        out = u1 / (2.0 * max(pi, _POS_FLOOR))
    else:
        out = u1 / (2.0 * (1.0 - pi))
    return max(out, _POS_FLOOR)


def cir_exact_values(y: np.ndarray, a: np.ndarray, kappa: float, sigma: float,
                     h: np.ndarray, rng: Generator) -> np.ndarray:
    """Exact conditional-law sampler (Poisson-Gamma noncentral chi-square).

    Y_{t+h} | Y_t = y equals c * chi2(4a/sigma^2, y e^{-kappa h}/c) with
    c = sigma^2 * psi_kappa(h)/4, sampled as 2c * Gamma(2a/sigma^2 + K),
    K ~ Poisson(y e^{-kappa h}/(2c)).
    """
    y = np.asarray(y, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), y.shape)
    a = np.broadcast_to(np.asarray(a, dtype=float), y.shape)
    if sigma == 0.0:
        ekh = np.exp(-kappa * h)
        return np.maximum(y * ekh + a * _psi_vec(kappa, h), _POS_FLOOR)
    c = 0.25 * sigma * sigma * _psi_vec(kappa, h)
    ncp = y * np.exp(-kappa * h) / c
    k = rng.poisson(0.5 * ncp)
    shape = (2.0 * a) / (sigma * sigma) + k
    return np.maximum((2.0 * c) * rng.standard_gamma(shape), _POS_FLOOR)


# ---------------------------------------------------------------------------
# Log-normal kernel
# ---------------------------------------------------------------------------

def lognormal_z_step(z, a: float, const: float, sigma: float, h, draw):
    """One Euler step of dZ = (-a*Z + const)dt + sigma dW, vectorized."""
    h = np.asarray(h, dtype=float)
    return z + (const - a * np.asarray(z, dtype=float)) * h \
        + sigma * np.sqrt(h) * np.asarray(draw, dtype=float)


# ---------------------------------------------------------------------------
# Single-step operations
# ---------------------------------------------------------------------------

def _check_step(y: float, t_from: float, t_to: float) -> None:
    if not y > 0.0:
        raise DomainError(f"factor value must be > 0, got {y}")
    if t_to < t_from:
        raise DomainError(f"t_to={t_to} precedes t_from={t_from}")


def step_cir(state: FactorState, x: int, t_from: float, t_to: float,
             dynamics: Cir, li: LocalIntensity, rng: Generator) -> FactorState:
    """Advance a CIR factor over [t_from, t_to] at loss level x.

    The drift target theta = lambda(t_from, x) is frozen at the step's left
    endpoint, which is exact for piecewise-constant intensity families.

    Args:
        state: Current factor state.
        x: Loss level, constant over the step.
        t_from: Step start.
        t_to: Step end, >= t_from.
        dynamics: CIR parameters; scheme selects the stepper.
        li: Intensity family supplying theta.
        rng: The particle's Brownian stream.

    Returns:
        New state at t_to, strictly positive.

    Raises:
        DomainError: If state.y <= 0 or t_to < t_from.
    """
    _check_step(state.y, t_from, t_to)
    h = t_to - t_from
    if h == 0.0:
        return FactorState(state.y, t_to)
    theta = li.value(t_from, x)
    a = dynamics.kappa * theta
    if dynamics.scheme == "exact":
        y_new = float(cir_exact_values(np.array([state.y]), np.array([a]),
                                       dynamics.kappa, dynamics.sigma,
                                       np.array([h]), rng)[0])
    else:
        z = float(rng.standard_normal()) if dynamics.sigma > 0.0 else 0.0
        y_new = _cir_step_one(state.y, a, dynamics.kappa, dynamics.sigma, h, z)
    return FactorState(y_new, t_to)


def step_lognormal(state: FactorState, t_from: float, t_to: float,
                   dynamics: LogNormalJump, rng: Generator) -> FactorState:
    """Advance a log-normal factor by one Euler step on Z = log Y.

    Args:
        state: Current factor state (y > 0).
        t_from: Step start.
        t_to: Step end, >= t_from.
        dynamics: Log-normal parameters; drift_mode picks the Z drift const.
        rng: The particle's Brownian stream.

    Returns:
        New state exp(Z') at t_to, strictly positive.

    Raises:
        DomainError: If state.y <= 0 or t_to < t_from.
    """
    _check_step(state.y, t_from, t_to)
    h = t_to - t_from
    if h == 0.0:
        return FactorState(state.y, t_to)
    z = float(rng.standard_normal()) if dynamics.sigma > 0.0 else 0.0
    zi = math.log(state.y)
    zi = zi + (dynamics.z_drift_const - dynamics.a * zi) * h \
        + dynamics.sigma * math.sqrt(h) * z
    return FactorState(math.exp(zi), t_to)


def step_generic(state: FactorState, x: int, t_from: float, t_to: float,
                 dynamics: GenericEuler, rng: Generator) -> FactorState:
    """Advance user dynamics by one explicit Euler step (no positivity)."""
    if t_to < t_from:
        raise DomainError(f"t_to={t_to} precedes t_from={t_from}")
    h = t_to - t_from
    if h == 0.0:
        return FactorState(state.y, t_to)
    z = float(rng.standard_normal())
    b = float(dynamics.drift(t_from, x, state.y))
    v = float(dynamics.vol(t_from, x, state.y))
    return FactorState(state.y + b * h + v * math.sqrt(h) * z, t_to)


def apply_jump(state: FactorState, t: float, x_pre: int,
               dynamics: FactorDynamics) -> FactorState:
    """Apply the factor jump map at a loss jump: Y -> Y + gamma(t-, x, Y).

    CIR factors are unaffected; log-normal factors scale by (1 + gamma);
    generic dynamics add jump(t, x_pre, y).
    """
    if isinstance(dynamics, Cir):
        return state
    if isinstance(dynamics, LogNormalJump):
        return FactorState(state.y * (1.0 + dynamics.gamma), state.t_last)
    return FactorState(state.y + float(dynamics.jump(t, x_pre, state.y)),
                       state.t_last)


# ---------------------------------------------------------------------------
# Engine-facing bulk steppers
# ---------------------------------------------------------------------------

class _CirStepper:
    """Vector/scalar CIR stepping over the engine's particle arrays."""

    def __init__(self, dyn: Cir, li: LocalIntensity, n: int):
        if dyn.scheme == "exact":
            raise DomainError(
                "the particle engine requires the second-order CIR scheme; "
                "the exact mode's draw count per step is random")
        self.dyn = dyn
        self.li = li
        self.ys = np.full(n, dyn.y0, dtype=float)

    def advance_all(self, xs: np.ndarray, t_last: np.ndarray, t_to: float,
                    streams) -> None:
        h = t_to - t_last
        dyn = self.dyn
        if h.min() > 0.0:
            z = streams.normals_all()
            a = dyn.kappa * self.li.values_at(t_last, xs)
            self.ys = cir_step_values(self.ys, a, dyn.kappa, dyn.sigma, h, z)
            return
        idx = np.nonzero(h > 0.0)[0]
        if idx.size == 0:
            return
        z = streams.normals_for(idx)
        a = dyn.kappa * self.li.values_at(t_last[idx], xs[idx])
        self.ys[idx] = cir_step_values(self.ys[idx], a, dyn.kappa, dyn.sigma,
                                       h[idx], z)

    def advance_one(self, i: int, x: int, t_from: float, t_to: float,
                    streams) -> None:
        if t_to <= t_from:
            return
        z = streams.normal_one(i)
        dyn = self.dyn
        a = dyn.kappa * self.li.value(t_from, x)
        self.ys[i] = _cir_step_one(float(self.ys[i]), a, dyn.kappa, dyn.sigma,
                                   t_to - t_from, z)

    def jump_one(self, i: int, x_pre: int, t: float) -> None:
        pass


class _LogNormalStepper:
    """Euler stepping of Z = log Y with the multiplicative jump map."""

    def __init__(self, dyn: LogNormalJump, li: LocalIntensity, n: int):
        self.dyn = dyn
        self.zs = np.full(n, math.log(dyn.y0), dtype=float)
        self.ys = np.full(n, dyn.y0, dtype=float)
        self._log1p_gamma = math.log1p(dyn.gamma)

    def advance_all(self, xs: np.ndarray, t_last: np.ndarray, t_to: float,
                    streams) -> None:
        h = t_to - t_last
        dyn = self.dyn
        if h.min() > 0.0:
            z = streams.normals_all()
            self.zs += (dyn.z_drift_const - dyn.a * self.zs) * h \
                + dyn.sigma * np.sqrt(h) * z
            self.ys = np.exp(self.zs)
            return
        idx = np.nonzero(h > 0.0)[0]
        if idx.size == 0:
            return
        z = streams.normals_for(idx)
        zi = self.zs[idx]
        zi = zi + (dyn.z_drift_const - dyn.a * zi) * h[idx] \
            + dyn.sigma * np.sqrt(h[idx]) * z
        self.zs[idx] = zi
        self.ys[idx] = np.exp(zi)

    def advance_one(self, i: int, x: int, t_from: float, t_to: float,
                    streams) -> None:
        if t_to <= t_from:
            return
        z = streams.normal_one(i)
        dyn = self.dyn
        h = t_to - t_from
        zi = float(self.zs[i])
        zi = zi + (dyn.z_drift_const - dyn.a * zi) * h \
            + dyn.sigma * math.sqrt(h) * z
        self.zs[i] = zi
        self.ys[i] = math.exp(zi)

    def jump_one(self, i: int, x_pre: int, t: float) -> None:
        zi = float(self.zs[i]) + self._log1p_gamma
        self.zs[i] = zi
        self.ys[i] = math.exp(zi)


class _GenericStepper:
    """Explicit Euler stepping of user-supplied coefficients."""

    def __init__(self, dyn: GenericEuler, li: LocalIntensity, n: int):
        self.dyn = dyn
        self.ys = np.full(n, dyn.y0, dtype=float)

    def advance_all(self, xs: np.ndarray, t_last: np.ndarray, t_to: float,
                    streams) -> None:
        h = t_to - t_last
        dyn = self.dyn
        if h.min() > 0.0:
            z = streams.normals_all()
            ys = self.ys
            self.ys = ys + dyn.drift(t_last, xs, ys) * h \
                + dyn.vol(t_last, xs, ys) * np.sqrt(h) * z
            return
        idx = np.nonzero(h > 0.0)[0]
        if idx.size == 0:
            return
        z = streams.normals_for(idx)
        ys = self.ys[idx]
        self.ys[idx] = ys + dyn.drift(t_last[idx], xs[idx], ys) * h[idx] \
            + dyn.vol(t_last[idx], xs[idx], ys) * np.sqrt(h[idx]) * z

    def advance_one(self, i: int, x: int, t_from: float, t_to: float,
                    streams) -> None:
        if t_to <= t_from:
            return
        z = streams.normal_one(i)
        dyn = self.dyn
        h = t_to - t_from
        y = float(self.ys[i])
        self.ys[i] = y + float(dyn.drift(t_from, x, y)) * h \
            + float(dyn.vol(t_from, x, y)) * math.sqrt(h) * z

    def jump_one(self, i: int, x_pre: int, t: float) -> None:
        y = float(self.ys[i])
        self.ys[i] = y + float(self.dyn.jump(t, x_pre, y))


def make_stepper(dynamics: FactorDynamics, li: LocalIntensity, n: int):
    """Bulk stepper for the particle engine, matching the dynamics kind."""
    if isinstance(dynamics, Cir):
        return _CirStepper(dynamics, li, n)
    if isinstance(dynamics, LogNormalJump):
        return _LogNormalStepper(dynamics, li, n)
    if isinstance(dynamics, GenericEuler):
        return _GenericStepper(dynamics, li, n)
    raise DomainError(f"unknown dynamics {type(dynamics).__name__}")
