"""Discrete-factor engine: truncated Fokker-Planck ODE and joint CTMC.

When the factor takes finitely many states {0..J-1} with per-level rate
matrices mu^k and values f_vals[j], the joint law P[i][j] = P(X_t=i, Y_t=j)
solves a closed ODE system whose right-hand side, evaluated on the
nonnegative part of the state, is

    (Psi(t, x))[i][j] = sum_k mu^i[k][j] x[i][k]
                        + lambda(t,i-1) f(j) x[i-1][j] / phi(x, i-1)   (i >= 1)
                        - lambda(t,i)   f(j) x[i][j]   / phi(x, i)     (i <= M-1)

with phi(x, i) = sum_j f(j) x[i][j] / sum_j x[i][j]. Whenever a level's mass
is below eps_mass the ratio is extended by continuity: phi returns the lower
clamp bound and every flux term involving that level is set to zero exactly.

``solve_fp`` integrates P' = Psi(t, (P)_+) with classic fixed-step RK4 and
verifies positivity/mass tolerances along the trajectory. The companion
``simulate_joint_ctmc`` builds the joint chain whose X-jump rate is
lambda(t,x) f(y)/phi(t,x) — with phi read off the ODE solution — and whose
factor moves at rates mu^x, by thinning against the constant bound
lambda_sup * f_max/f_min + sup|mu_ii|. Agreement between the two is the
module's central cross-check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalFailure
from .model import LocalIntensity
from .rngs import ROLE_CTMC_BATCH, ROLE_CTMC_PATH, make_generator

__all__ = [
    "EPS_MASS",
    "GeneratorFamily",
    "FactorValues",
    "FpState",
    "FpTrajectory",
    "JointCtmcPath",
    "phi",
    "psi_plus",
    "lipschitz_bound",
    "solve_fp",
    "dirac_initial",
    "simulate_joint_ctmc",
    "simulate_joint_ctmc_terminals",
]

EPS_MASS = 1e-14


@dataclass(frozen=True)
class GeneratorFamily:
    """Per-loss-level factor generators: rates[k] is the J x J matrix mu^k.

    Invariants enforced at construction: off-diagonals >= 0, diagonals <= 0,
    rows summing to 0 within 1e-12 (conservative truncation; a leaking
    generator would silently destroy mass conservation).
    """

    rates: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rates, dtype=float)
        object.__setattr__(self, "rates", r)
        if r.ndim != 3 or r.shape[1] != r.shape[2]:
            raise DomainError(
                f"rates must have shape (m+1, J, J), got {r.shape}")
        j = r.shape[1]
        off = r.copy()
        off[:, np.arange(j), np.arange(j)] = 0.0
        if off.min() < 0.0:
            raise DomainError("off-diagonal rates must be >= 0")
        diag = r[:, np.arange(j), np.arange(j)]
        if diag.max() > 0.0:
            raise DomainError("diagonal rates must be <= 0")
        if np.abs(r.sum(axis=2)).max() > 1e-12:
            raise DomainError("each generator row must sum to 0 (within 1e-12)")

    @property
    def n_levels(self) -> int:
        return self.rates.shape[0]

    @property
    def j(self) -> int:
        return self.rates.shape[1]

    @property
    def sup_diag(self) -> float:
        """sup over levels and states of |mu_ii|."""
        j = self.j
        return float(np.abs(self.rates[:, np.arange(j), np.arange(j)]).max())


@dataclass(frozen=True)
class FactorValues:
    """f evaluated on the discrete factor states; finite and positive."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or v.size == 0:
            raise DomainError("factor values must be a nonempty vector")
        if not np.all(np.isfinite(v)) or v.min() <= 0.0:
            raise DomainError("factor values must be finite and > 0")

    def check_bounds(self, f_low: float, f_high: float) -> None:
        """Verify f_low <= values <= f_high."""
        if self.values.min() < f_low or self.values.max() > f_high:
            raise DomainError(
                f"factor values must lie in [{f_low}, {f_high}], got range "
                f"[{self.values.min()}, {self.values.max()}]")


@dataclass
class FpState:
    """Joint law snapshot: p[i][j] ~ P(X_t=i, Y_t=j) at time t."""

    p: np.ndarray
    t: float


def _fvals_array(fvals) -> np.ndarray:
    if isinstance(fvals, FactorValues):
        return fvals.values
    return np.asarray(fvals, dtype=float)


def phi(p, i: int, fvals, f_low: float | None = None,
        eps_mass: float = EPS_MASS) -> float:
    """Mean factor value f given loss level i under (the positive part of) p.

    Args:
        p: FpState or (m+1, J) array.
        i: Loss level.
        fvals: Factor values (FactorValues or array).
        f_low: Value returned when the level's mass is <= eps_mass; defaults
            to min(fvals), a valid continuity extension.
        eps_mass: Dead-level threshold.

    Returns:
        sum_j f[j] p[i][j] / sum_j p[i][j], or the fallback on a dead level.
    """
    arr = p.p if isinstance(p, FpState) else np.asarray(p, dtype=float)
    f = _fvals_array(fvals)
    col = np.maximum(arr[i], 0.0)
    mass = float(col.sum())
    if mass > eps_mass:
        return float(col @ f) / mass
    return float(f.min()) if f_low is None else float(f_low)


def _phi_rows(xp: np.ndarray, f: np.ndarray, fallback: float,
              eps_mass: float) -> np.ndarray:
    """phi per level for a clipped state xp (vectorized over levels)."""
    mass = xp.sum(axis=1)
    num = xp @ f
    alive = mass > eps_mass
    return np.where(alive, num / np.where(alive, mass, 1.0), fallback)


def psi_plus(t: float, p, li: LocalIntensity, gen: GeneratorFamily, fvals,
             eps_mass: float = EPS_MASS) -> np.ndarray:
    """Right-hand side of the truncated Fokker-Planck system at (t, (p)_+).

    The input is clipped to its nonnegative part before evaluation. Level 0
    has no inflow; level M has no outflow; levels whose clipped mass is
    <= eps_mass contribute zero flux exactly (continuity extension).

    Returns:
        Array of shape (m+1, J): the time derivative.
    """
    arr = p.p if isinstance(p, FpState) else np.asarray(p, dtype=float)
    f = _fvals_array(fvals)
    m_top = arr.shape[0] - 1
    xp = np.maximum(arr, 0.0)
    deriv = np.einsum("ik,ikj->ij", xp, gen.rates)
    mass = xp.sum(axis=1)
    num = xp @ f
    lam = li.level_values(t)
    alive = mass > eps_mass
    # lam/phi = lam*mass/num on live levels; dead levels carry no flux.
    with np.errstate(invalid="ignore", divide="ignore"):
        ratec = np.where(alive, lam * mass / num, 0.0)
    flux = (ratec[:, None] * xp) * f[None, :]
    flux[m_top] = 0.0
    deriv -= flux
    deriv[1:] += flux[:-1]
    return deriv


def lipschitz_bound(gen: GeneratorFamily, lambda_bar: float, f_low: float,
                    f_high: float) -> float:
    """Explicit global Lipschitz constant of the clipped right-hand side.

    K = 2*sup|mu_ii| + 2*lambda_bar*(1 + 2*f_high/f_low), valid for the
    1-norm on states in the simplex neighborhood.
    """
    return 2.0 * gen.sup_diag + 2.0 * lambda_bar * (1.0 + 2.0 * f_high / f_low)


@dataclass
class FpTrajectory:
    """Stored output of solve_fp on its time grid."""

    times: np.ndarray   # (K+1,)
    probs: np.ndarray   # (K+1, m+1, J)
    phis: np.ndarray    # (K+1, m+1)

    @property
    def final(self) -> FpState:
        return FpState(self.probs[-1].copy(), float(self.times[-1]))

    def marginal_x(self, k: int = -1) -> np.ndarray:
        """Loss-level marginal at stored step k (default: final time)."""
        return self.probs[k].sum(axis=1)

    def phi_at(self, t: float, level: int) -> float:
        """phi(t, level), linearly interpolated between stored times."""
        return float(np.interp(t, self.times, self.phis[:, level]))

    def phi_at_many(self, ts: np.ndarray, level: int) -> np.ndarray:
        return np.interp(ts, self.times, self.phis[:, level])


def dirac_initial(m: int, j: int, x0: int, y0: int) -> np.ndarray:
    """Initial Dirac mass at (x0, y0) as an (m+1, J) array."""
    if not 0 <= x0 <= m:
        raise DomainError(f"x0={x0} outside {{0..{m}}}")
    if not 0 <= y0 < j:
        raise DomainError(f"y0={y0} outside {{0..{j - 1}}}")
    p0 = np.zeros((m + 1, j))
    p0[x0, y0] = 1.0
    return p0


def solve_fp(p0: np.ndarray, li: LocalIntensity, gen: GeneratorFamily, fvals,
             t_end: float, dt: float, *, tol_pos: float = 1e-12,
             tol_mass: float = 1e-8, eps_mass: float = EPS_MASS,
             f_low: float | None = None, store_every: int = 1) -> FpTrajectory:
    """Integrate P' = Psi(t, (P)_+) by classic fixed-step RK4.

    Args:
        p0: Initial law, shape (m+1, J), nonnegative, total mass 1.
        li: Local-intensity family with li.m == m.
        gen: Factor generator family, one J x J matrix per level.
        fvals: Factor values on the J states.
        t_end: Integration horizon >= 0.
        dt: Step size > 0; the final step shrinks to land exactly on t_end.
        tol_pos: Positivity tolerance: min entry >= -tol_pos along the way.
        tol_mass: Mass tolerance: |total - 1| <= tol_mass along the way.
        eps_mass: Dead-level threshold of the continuity extension.
        f_low: phi fallback on dead levels (default min(fvals)).
        store_every: Keep every k-th step in the trajectory (last always kept).

    Returns:
        FpTrajectory with times, laws, and per-level phi values.

    Raises:
        DomainError: Inconsistent shapes or an invalid initial law.
        NumericalFailure: Tolerance violated, reporting the offending time.
    """
    p = np.array(p0, dtype=float)
    f = _fvals_array(fvals)
    m_top = gen.n_levels - 1
    if p.shape != (gen.n_levels, gen.j):
        raise DomainError(
            f"p0 shape {p.shape} != (m+1, J) = ({gen.n_levels}, {gen.j})")
    if f.shape != (gen.j,):
        raise DomainError(f"fvals length {f.size} != J = {gen.j}")
    if li.m != m_top:
        raise DomainError(f"intensity has m={li.m}, generators have m={m_top}")
    if p.min() < 0.0 or abs(p.sum() - 1.0) > 1e-12:
        raise DomainError("p0 must be nonnegative with total mass 1")
    if not dt > 0.0:
        raise DomainError(f"dt must be > 0, got {dt}")
    if t_end < 0.0:
        raise DomainError(f"t_end must be >= 0, got {t_end}")

    fallback = float(f.min()) if f_low is None else float(f_low)
    n_full = int(math.floor(t_end / dt + 1e-12))
    rem = t_end - n_full * dt
    if rem < 1e-12 * max(dt, 1.0):
        rem = 0.0
    n_steps = n_full + (1 if rem > 0.0 else 0)

    times = [0.0]
    probs = [p.copy()]
    phis = [_phi_rows(np.maximum(p, 0.0), f, fallback, eps_mass)]

    def _check(state: np.ndarray, t: float) -> None:
        low = float(state.min())
        mass_err = abs(float(state.sum()) - 1.0)
        if low < -tol_pos:
            raise NumericalFailure(
                f"positivity violated: min entry {low} < -{tol_pos}", t=t)
        if mass_err > tol_mass:
            raise NumericalFailure(
                f"mass violated: |total - 1| = {mass_err} > {tol_mass}", t=t)

    def _rhs(t: float, state: np.ndarray) -> np.ndarray:
        return psi_plus(t, state, li, gen, f, eps_mass)

    _check(p, 0.0)
    for k in range(n_steps):
        t = k * dt
        h = dt if k < n_full else rem
        t_next = (k + 1) * dt if k + 1 <= n_full else t_end
        if k == n_steps - 1:
            t_next = t_end
        k1 = _rhs(t, p)
        k2 = _rhs(t + 0.5 * h, p + (0.5 * h) * k1)
        k3 = _rhs(t + 0.5 * h, p + (0.5 * h) * k2)
        k4 = _rhs(t + h, p + h * k3)
        p = p + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check(p, t_next)
        if (k + 1) % store_every == 0 or k == n_steps - 1:
            times.append(t_next)
            probs.append(p.copy())
            phis.append(_phi_rows(np.maximum(p, 0.0), f, fallback, eps_mass))

    return FpTrajectory(times=np.array(times), probs=np.array(probs),
                        phis=np.array(phis))


@dataclass
class JointCtmcPath:
    """Event history of one joint (X, Y) chain: states after each transition."""

    times: list[float]
    xs: list[int]
    ys: list[int]

    @property
    def x_terminal(self) -> int:
        return self.xs[-1]

    @property
    def y_terminal(self) -> int:
        return self.ys[-1]


def _thinning_bound(li: LocalIntensity, gen: GeneratorFamily,
                    f: np.ndarray, f_low: float | None,
                    f_high: float | None) -> float:
    fl = float(f.min()) if f_low is None else float(f_low)
    fh = float(f.max()) if f_high is None else float(f_high)
    return li.sup_value() * fh / fl + gen.sup_diag


def simulate_joint_ctmc(li: LocalIntensity, gen: GeneratorFamily, fvals,
                        x0: int, y0: int, t_end: float, seed,
                        phi_table: FpTrajectory, *,
                        f_low: float | None = None,
                        f_high: float | None = None,
                        path_index: int = 0) -> JointCtmcPath:
    """Simulate one joint (X, Y) path by thinning.

    Proposals arrive at the constant rate B = sup(lambda)*f_high/f_low +
    sup|mu_ii|; each is attributed to an X-jump with probability
    lambda(t,x)*f(y)/phi(t,x)/B — phi interpolated from the ODE solution —
    or to a factor move y -> j with probability mu^x[y][j]/B, or rejected.
    X and Y never move at the same proposal.

    Args:
        li: Local-intensity family.
        gen: Factor generators.
        fvals: Factor values on the J states.
        x0: Initial loss level.
        y0: Initial factor state.
        t_end: Horizon.
        seed: Master seed; the stream is (seed, ctmc-role, path_index).
        phi_table: FpTrajectory whose phis cover [0, t_end].
        f_low: Thinning-bound clamp bounds (default: range of fvals).
        f_high: See f_low.
        path_index: Stream index for independent replications.

    Returns:
        JointCtmcPath starting at (0, x0, y0).
    """
    f = _fvals_array(fvals)
    j = gen.j
    if not 0 <= x0 <= gen.n_levels - 1 or not 0 <= y0 < j:
        raise DomainError(f"initial state ({x0}, {y0}) out of range")
    bound = _thinning_bound(li, gen, f, f_low, f_high)
    rng = make_generator(seed, ROLE_CTMC_PATH, path_index)
    x, y = int(x0), int(y0)
    path = JointCtmcPath(times=[0.0], xs=[x], ys=[y])
    if bound <= 0.0:
        return path
    rates = gen.rates
    t = 0.0
    while True:
        t += rng.exponential(1.0 / bound)
        if t > t_end:
            return path
        u = rng.random() * bound
        r_x = li.value(t, x) * f[y] / phi_table.phi_at(t, x)
        if u < r_x:
            x += 1
            path.times.append(t)
            path.xs.append(x)
            path.ys.append(y)
            continue
        acc = r_x
        for cand in range(j):
            if cand == y:
                continue
            acc += rates[x, y, cand]
            if u < acc:
                y = cand
                path.times.append(t)
                path.xs.append(x)
                path.ys.append(y)
                break


def simulate_joint_ctmc_terminals(li: LocalIntensity, gen: GeneratorFamily,
                                  fvals, x0: int, y0: int, t_end: float,
                                  n_paths: int, seed,
                                  phi_table: FpTrajectory, *,
                                  f_low: float | None = None,
                                  f_high: float | None = None
                                  ) -> tuple[np.ndarray, np.ndarray]:
    """Terminal (X, Y) of many joint chains, simulated in vectorized rounds.

    Same law as simulate_joint_ctmc but all paths share one batch stream
    (role distinct from the scalar simulator), with each thinning round
    drawing exponentials and uniforms for the still-active paths only.

    Returns:
        (x_terminal, y_terminal) integer arrays of length n_paths.
    """
    f = _fvals_array(fvals)
    j = gen.j
    if not 0 <= x0 <= gen.n_levels - 1 or not 0 <= y0 < j:
        raise DomainError(f"initial state ({x0}, {y0}) out of range")
    bound = _thinning_bound(li, gen, f, f_low, f_high)
    xs = np.full(n_paths, int(x0), dtype=np.int64)
    ys = np.full(n_paths, int(y0), dtype=np.int64)
    if bound <= 0.0:
        return xs, ys
    rng = make_generator(seed, ROLE_CTMC_BATCH, 0)
    t = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    rates = gen.rates
    while True:
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            return xs, ys
        t[idx] += rng.exponential(1.0 / bound, size=idx.size)
        crossed = t[idx] > t_end
        alive[idx[crossed]] = False
        act = idx[~crossed]
        if act.size == 0:
            continue
        u = rng.random(act.size) * bound
        ta, xa, ya = t[act], xs[act], ys[act]
        ph = np.empty(act.size)
        for lvl in np.unique(xa):
            sel = xa == lvl
            ph[sel] = phi_table.phi_at_many(ta[sel], int(lvl))
        lam = li.values_at(ta, xa)
        r_x = lam * f[ya] / ph
        jump = u < r_x
        xs[act[jump]] += 1
        rem = ~jump
        if rem.any():
            ar = act[rem]
            rr = rates[xa[rem], ya[rem], :].copy()
            rr[np.arange(ar.size), ya[rem]] = 0.0
            cum = r_x[rem, None] + np.cumsum(rr, axis=1)
            target = np.sum(u[rem, None] >= cum, axis=1)
            moved = target < j
            ys[ar[moved]] = target[moved]
