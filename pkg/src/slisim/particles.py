"""Interacting particle system for the stochastic local-intensity model.

N particles carry loss levels X^i in {0..m} and factor values Y^i. Loss
jumps are produced by system-wide thinning: proposals arrive at rate
n*lambda_bar*f_high/f_low, hit a uniformly chosen particle i, and are
accepted with probability

    R = (f_low/(lambda_bar*f_high)) * lambda(t-, X^i) * f(Y^i)
        * count[X^i] / fsum[X^i]

where count[j] counts particles at level j and fsum[j] sums their clamped
factor values f(Y^i). The ratio uses each particle's *stored* Y^i (its value
at the last discretization time), and count/fsum therefore refer to stored
values as well; Y^i is advanced to the proposal time only when the jump is
accepted. On acceptance, in order: the old contribution leaves the table,
Y^i advances to the proposal time, the factor jump map applies, X^i
increments, the new contribution enters the table.

Two execution strategies share this exact event sequence:

- ``naive`` recomputes count/fsum from scratch at every proposal (O(n) per
  proposal);
- ``improved`` maintains them incrementally with O(1) updates per event and
  a full recompute at each of the d regular grid dates, where all factor
  values are also advanced (O(n) per grid date).

Because acceptance decisions depend only on values both strategies compute
identically — the stored Y^i, the exact integer counts, and (in
forced-recompute mode) freshly recomputed sums — the two strategies produce
bitwise-identical jump sequences under the shared stream layout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, InvariantViolation
from .factor import FactorDynamics, make_stepper
from .model import LocalIntensity, ModelParams, validate_params
from .rngs import ROLE_INIT, SystemStreams, make_generator

__all__ = [
    "PathRecord",
    "AggregateTable",
    "EngineDiagnostics",
    "ParticleSystem",
    "SystemSpec",
    "recompute_aggregates",
    "run_system",
]

_INF = float("inf")
# Headroom for the thinning bound: the acceptance ratio is <= 1 exactly in
# real arithmetic; float evaluation may exceed 1 by a few ulp, anything
# beyond this margin is a genuine invariant violation.
_RATIO_SLACK = 1e-9


@dataclass(frozen=True)
class PathRecord:
    """Observables of one particle's loss path over [0, T].

    Invariants: jump_times strictly increasing within [0, T];
    len(jump_times) == x_terminal - x_initial.
    """

    jump_times: list[float]
    x_initial: int
    x_terminal: int
    y_grid: np.ndarray | None = None


@dataclass
class AggregateTable:
    """Per-level particle counts and clamped-factor sums."""

    count: np.ndarray
    fsum: np.ndarray


@dataclass
class EngineDiagnostics:
    """Counters and invariant probes collected when checking is enabled."""

    n_proposals: int = 0
    n_jumps: int = 0
    n_grid_recomputes: int = 0
    ratio_min: float = _INF
    ratio_max: float = -_INF
    ratio_max_raw: float = -_INF
    count_mismatches: int = 0
    conservation_ok: bool = True
    max_fsum_drift: float = 0.0
    max_bound_violation: float = 0.0


def recompute_aggregates(xs: np.ndarray, ys: np.ndarray, f_low: float,
                         f_high: float, m: int):
    """Definitional aggregates from scratch.

    Returns:
        (count, fsum, fy): per-level counts, per-level sums of the clamped
        factor values, and the clamped values themselves.
    """
    fy = np.clip(ys, f_low, f_high)
    count = np.bincount(xs, minlength=m + 1)
    fsum = np.bincount(xs, weights=fy, minlength=m + 1)
    return count, fsum, fy


class ParticleSystem:
    """Mutable state of one interacting system plus its event operations.

    Args:
        params: Validated model parameters.
        li: Local-intensity family.
        dynamics: Factor dynamics (second-order CIR, log-normal, or generic).
        n: Particle count, >= 1.
        d: Regular grid steps, >= 1 (grid dates k*T/d, k = 0..d).
        seed: Master seed (int or tuple) for the stream layout.
        algorithm: "improved" (incremental aggregates) or "naive"
            (recompute at every proposal).
        x0: Initial loss level for all particles (ignored when initial_law
            is given).
        initial_law: Optional pmf over {0..m} to sample initial levels from.
        forced_recompute: Recompute aggregates at every proposal while still
            maintaining the incremental table; makes `improved` event
            sequences bitwise-equal to `naive`.
        compensated: Use Kahan-compensated addition for incremental fsum
            updates.
        record_y_grid: Store every particle's factor value on the grid.
        check_invariants: Collect EngineDiagnostics probes.

    Raises:
        ConfigError: Invalid parameters or options, with one named failure
            per violated assumption.
    """

    def __init__(self, params: ModelParams, li: LocalIntensity,
                 dynamics: FactorDynamics, n: int, d: int, seed, *,
                 algorithm: str = "improved", x0: int = 0,
                 initial_law=None, forced_recompute: bool = False,
                 compensated: bool = False, record_y_grid: bool = False,
                 check_invariants: bool = False, proposal_block: int = 4096):
        report = validate_params(params, li)
        failures = list(report.failures)
        if not isinstance(n, (int, np.integer)) or n < 1:
            failures.append(f"particle-count: n must be an integer >= 1, got {n!r}")
        if not isinstance(d, (int, np.integer)) or d < 1:
            failures.append(f"grid-steps: d must be an integer >= 1, got {d!r}")
        if algorithm not in ("naive", "improved"):
            failures.append(
                f"algorithm: must be 'naive' or 'improved', got {algorithm!r}")
        if initial_law is None:
            if not 0 <= x0 <= params.m:
                failures.append(f"initial-level: x0={x0} outside {{0..{params.m}}}")
        else:
            law = np.asarray(initial_law, dtype=float)
            if law.shape != (params.m + 1,):
                failures.append(
                    f"initial-law: needs length m+1={params.m + 1}, got shape {law.shape}")
            elif law.min() < 0 or abs(law.sum() - 1.0) > 1e-9:
                failures.append("initial-law: entries must be >= 0 and sum to 1")
        if failures:
            raise ConfigError("invalid particle-system configuration", failures)

        self.params = params
        self.li = li
        self.dynamics = dynamics
        self.n = int(n)
        self.d = int(d)
        self.algorithm = algorithm
        self.forced_recompute = bool(forced_recompute)
        self.check_invariants = bool(check_invariants)
        self.diagnostics = EngineDiagnostics()

        rate = n * params.lambda_bar * params.f_high / params.f_low
        self.proposal_rate = rate
        if params.lambda_bar > 0.0:
            self.coeff = params.f_low / (params.lambda_bar * params.f_high)
        else:
            self.coeff = 0.0
        block = min(max(self.d + 40, 16), 4096)
        self.streams = SystemStreams(seed, self.n, rate, brownian_block=block,
                                     proposal_block=proposal_block)

        if initial_law is not None:
            law = np.asarray(initial_law, dtype=float)
            law = law / law.sum()
            gen = make_generator(seed, ROLE_INIT)
            xs = gen.choice(params.m + 1, size=self.n, p=law).astype(np.int64)
        else:
            xs = np.full(self.n, int(x0), dtype=np.int64)
        self.xs = xs
        self.xs_initial = xs.copy()
        self.xs_list: list[int] = xs.tolist()
        self.stepper = make_stepper(dynamics, li, self.n)
        self.t_last = np.zeros(self.n)
        self.t = 0.0
        self.grid: list[float] = np.linspace(0.0, params.horizon, self.d + 1).tolist()
        self.grid_index = 0
        self.jump_times: list[list[float]] = [[] for _ in range(self.n)]

        cnt, fs, fyv = recompute_aggregates(self.xs, self.stepper.ys,
                                            params.f_low, params.f_high, params.m)
        self.count: list[int] = cnt.tolist()
        self.fsum: list[float] = fs.tolist()
        self.fy: list[float] = fyv.tolist()
        self._comp: list[float] | None = [0.0] * (params.m + 1) if compensated else None
        self._lam_levels: list[float] | None = (
            li.level_values(0.0).tolist() if li.time_constant else None)
        self._ygrid: np.ndarray | None = None
        if record_y_grid:
            self._ygrid = np.empty((self.d + 1, self.n))
            self._ygrid[0] = self.stepper.ys
        self._ebuf: list[float] = []
        self._ibuf: list[int] = []
        self._pcur = 0
        self._prop_clock = 0.0

    # -- derived views -------------------------------------------------------

    @property
    def aggregates(self) -> AggregateTable:
        """Snapshot of the current (incrementally maintained) table."""
        return AggregateTable(np.array(self.count, dtype=np.int64),
                              np.array(self.fsum, dtype=float))

    # -- event operations ------------------------------------------------------

    def propose_next_event(self) -> tuple[float, int]:
        """Next system-wide proposal: (time, uniformly chosen particle).

        The waiting time is Exp(n*lambda_bar*f_high/f_low) via the inverse
        CDF -ln(u)/rate; the index is floor(u'*n); u then u' are consumed
        from the system stream in that order.
        """
        if self._pcur >= len(self._ebuf):
            self._ebuf, self._ibuf = self.streams.refill_proposals()
            self._pcur = 0
        e = self._ebuf[self._pcur]
        i = self._ibuf[self._pcur]
        self._pcur += 1
        self._prop_clock += e
        return self._prop_clock, i

    def advance_to_grid(self, t_target: float) -> None:
        """Advance every particle's factor to t_target and rebuild the table.

        Each particle steps from its own t_i to t_target using its own
        Brownian stream (particles already at t_target consume nothing);
        afterwards all t_i equal t_target and count/fsum are freshly
        recomputed, clearing any accumulated float drift.

        Raises:
            DomainError: If some particle is already beyond t_target.
        """
        if float(self.t_last.max()) > t_target:
            raise DomainError(
                f"cannot advance to t={t_target}: a particle is already later")
        k = self.grid_index
        while k < self.d and self.grid[k + 1] <= t_target:
            k += 1
        self._advance_to(t_target, k if self.grid[k] == t_target else None)

    def _advance_to(self, s: float, grid_k: int | None) -> None:
        p = self.params
        if self.check_invariants:
            self._probe_table()
        self.stepper.advance_all(self.xs, self.t_last, s, self.streams)
        self.t_last[:] = s
        cnt, fs, fyv = recompute_aggregates(self.xs, self.stepper.ys,
                                            p.f_low, p.f_high, p.m)
        self.count[:] = cnt.tolist()
        self.fsum[:] = fs.tolist()
        self.fy[:] = fyv.tolist()
        if self._comp is not None:
            self._comp[:] = [0.0] * (p.m + 1)
        if grid_k is not None:
            self.grid_index = grid_k
            if self._ygrid is not None:
                self._ygrid[grid_k] = self.stepper.ys
        self.t = s
        if self.check_invariants:
            d = self.diagnostics
            d.n_grid_recomputes += 1
            if int(cnt.sum()) != self.n:
                d.conservation_ok = False

    def _probe_table(self) -> None:
        """Compare the incremental table against a fresh recompute."""
        p = self.params
        cnt, fs, _ = recompute_aggregates(self.xs, self.stepper.ys,
                                          p.f_low, p.f_high, p.m)
        d = self.diagnostics
        if not np.array_equal(cnt, np.array(self.count, dtype=np.int64)):
            d.count_mismatches += 1
        drift = float(np.max(np.abs(fs - np.array(self.fsum))))
        if drift > d.max_fsum_drift:
            d.max_fsum_drift = drift
        inc = np.array(self.fsum)
        lo_gap = float(np.max(p.f_low * cnt - inc, initial=0.0))
        hi_gap = float(np.max(inc - p.f_high * cnt, initial=0.0))
        viol = max(lo_gap, hi_gap)
        if viol > d.max_bound_violation:
            d.max_bound_violation = viol

    def acceptance_ratio(self, t_prop: float, i: int) -> float:
        """Thinning acceptance probability for a proposal aimed at particle i.

        Uses the stored (last-discretized) factor value of particle i and
        the left limit of the intensity at the proposal time. The result is
        clipped to 1 within a few-ulp margin; a larger excess aborts.

        Raises:
            InvariantViolation: fsum at the particle's level is <= 0, or the
                computed ratio exceeds 1 beyond float headroom.
        """
        x = self.xs_list[i]
        if self.algorithm == "naive" or self.forced_recompute:
            p = self.params
            cnt_a, fs_a, fy_a = recompute_aggregates(
                self.xs, self.stepper.ys, p.f_low, p.f_high, p.m)
            if self.forced_recompute:
                self.count[:] = cnt_a.tolist()
                self.fsum[:] = fs_a.tolist()
            c, fs, fi = cnt_a[x], fs_a[x], fy_a[i]
        else:
            c, fs, fi = self.count[x], self.fsum[x], self.fy[i]
        lam = (self._lam_levels[x] if self._lam_levels is not None
               else self.li.left_value(t_prop, x))
        if fs <= 0.0:
            raise InvariantViolation(f"fsum[{x}] = {fs} <= 0 at t={t_prop}")
        r = self.coeff * lam * fi * c / fs
        if r > 1.0:
            if r > 1.0 + _RATIO_SLACK:
                raise InvariantViolation(f"acceptance ratio {r} > 1 at t={t_prop}")
            r = 1.0
        return r

    def apply_jump_event(self, t_prop: float, i: int) -> None:
        """Execute an accepted jump for particle i at t_prop."""
        x = self.xs_list[i]
        self._jump(t_prop, i, x, self.fy[i])

    def _jump(self, tp: float, i: int, x: int, fi: float) -> None:
        if x >= self.params.m:
            raise InvariantViolation(
                f"particle {i} already at top level {x}; ratio should be 0")
        count, fsum, comp = self.count, self.fsum, self._comp
        count[x] -= 1
        if comp is None:
            fsum[x] -= fi
        else:
            yv = -fi - comp[x]
            tv = fsum[x] + yv
            comp[x] = (tv - fsum[x]) - yv
            fsum[x] = tv
        stepper = self.stepper
        stepper.advance_one(i, x, self.t_last[i], tp, self.streams)
        stepper.jump_one(i, x, tp)
        nx = x + 1
        self.xs_list[i] = nx
        self.xs[i] = nx
        p = self.params
        y_new = stepper.ys[i]
        f_new = min(max(y_new, p.f_low), p.f_high)
        count[nx] += 1
        if comp is None:
            fsum[nx] += f_new
        else:
            yv = f_new - comp[nx]
            tv = fsum[nx] + yv
            comp[nx] = (tv - fsum[nx]) - yv
            fsum[nx] = tv
        self.fy[i] = f_new
        self.t_last[i] = tp
        self.jump_times[i].append(tp)
        self.t = tp
        self.diagnostics.n_jumps += 1

    # -- the event loop --------------------------------------------------------

    def run_to_horizon(self) -> None:
        """Drive proposals, grid advances, and jumps until t > horizon."""
        streams = self.streams
        refill = streams.refill_proposals
        dec = streams.decision_rand
        ebuf, ibuf, pc = self._ebuf, self._ibuf, self._pcur
        pb = len(ebuf)
        xs_l = self.xs_list
        fy = self.fy
        count, fsum = self.count, self.fsum
        comp = self._comp
        jumps = self.jump_times
        xs_np = self.xs
        t_last = self.t_last
        stepper = self.stepper
        p = self.params
        m, lo, hi, T = p.m, p.f_low, p.f_high, p.horizon
        coeff = self.coeff
        lam_levels = self._lam_levels
        left_value = self.li.left_value
        naive = self.algorithm == "naive"
        forced = self.forced_recompute
        recompute_every = naive or forced
        check = self.check_invariants
        grid, d = self.grid, self.d
        sgi = self.grid_index
        tp = self._prop_clock
        next_g = grid[sgi + 1] if sgi < d else _INF
        nprop = 0
        rmin, rmax, rmax_raw = _INF, -_INF, -_INF

        while True:
            if pc == pb:
                ebuf, ibuf = refill()
                pb = len(ebuf)
                pc = 0
            e = ebuf[pc]
            i = ibuf[pc]
            pc += 1
            tp += e
            if tp > next_g:
                while sgi < d and tp > grid[sgi + 1]:
                    sgi += 1
                    self._advance_to(grid[sgi], sgi)
                next_g = grid[sgi + 1] if sgi < d else _INF
                if tp > T:
                    break
            x = xs_l[i]
            if recompute_every:
                cnt_a, fs_a, fy_a = recompute_aggregates(xs_np, stepper.ys, lo, hi, m)
                if forced:
                    count[:] = cnt_a.tolist()
                    fsum[:] = fs_a.tolist()
                c = cnt_a[x]
                fs = fs_a[x]
                fi = fy_a[i]
            else:
                c = count[x]
                fs = fsum[x]
                fi = fy[i]
            lam = lam_levels[x] if lam_levels is not None else left_value(tp, x)
            if fs <= 0.0:
                raise InvariantViolation(f"fsum[{x}] = {fs} <= 0 at t={tp}")
            r = coeff * lam * fi * c / fs
            nprop += 1
            if check and r > rmax_raw:
                rmax_raw = r
            if r > 1.0:
                if r > 1.0 + _RATIO_SLACK:
                    raise InvariantViolation(f"acceptance ratio {r} > 1 at t={tp}")
                r = 1.0
            if check:
                if r < rmin:
                    rmin = r
                if r > rmax:
                    rmax = r
            if dec[i]() < r:
                if x >= m:
                    raise InvariantViolation(
                        f"particle {i} already at top level {x}; ratio should be 0")
                count[x] -= 1
                if comp is None:
                    fsum[x] -= fi
                else:
                    yv = -fi - comp[x]
                    tv = fsum[x] + yv
                    comp[x] = (tv - fsum[x]) - yv
                    fsum[x] = tv
                stepper.advance_one(i, x, t_last[i], tp, streams)
                stepper.jump_one(i, x, tp)
                nx = x + 1
                xs_l[i] = nx
                xs_np[i] = nx
                y_new = stepper.ys[i]
                f_new = y_new if lo <= y_new <= hi else (lo if y_new < lo else hi)
                count[nx] += 1
                if comp is None:
                    fsum[nx] += f_new
                else:
                    yv = f_new - comp[nx]
                    tv = fsum[nx] + yv
                    comp[nx] = (tv - fsum[nx]) - yv
                    fsum[nx] = tv
                fy[i] = f_new
                t_last[i] = tp
                jumps[i].append(tp)

        self._ebuf, self._ibuf, self._pcur = ebuf, ibuf, pc
        self._prop_clock = tp
        self.grid_index = sgi
        self.t = T
        diag = self.diagnostics
        diag.n_jumps = sum(len(j) for j in jumps)
        diag.n_proposals += nprop
        if check:
            diag.ratio_min = min(diag.ratio_min, rmin)
            diag.ratio_max = max(diag.ratio_max, rmax)
            diag.ratio_max_raw = max(diag.ratio_max_raw, rmax_raw)

    def collect_records(self) -> list[PathRecord]:
        """Path records for all particles (call after run_to_horizon)."""
        ygrid = self._ygrid
        xs0 = self.xs_initial
        xs_l = self.xs_list
        jumps = self.jump_times
        out = []
        for i in range(self.n):
            yg = ygrid[:, i].copy() if ygrid is not None else None
            out.append(PathRecord(jump_times=jumps[i], x_initial=int(xs0[i]),
                                  x_terminal=xs_l[i], y_grid=yg))
        return out


def run_system(params: ModelParams, li: LocalIntensity,
               dynamics: FactorDynamics, n: int, d: int, *,
               algorithm: str = "improved", seed=0, x0: int = 0,
               initial_law=None, forced_recompute: bool = False,
               compensated: bool = False, record_y_grid: bool = False,
               check_invariants: bool = False,
               return_diagnostics: bool = False):
    """Simulate one interacting system over [0, horizon].

    Args:
        params: Model parameters (validated; all violations reported).
        li: Local-intensity family.
        dynamics: Factor dynamics.
        n: Particle count >= 1.
        d: Regular grid steps >= 1.
        algorithm: "naive" recomputes aggregates at every proposal;
            "improved" updates them incrementally between grid recomputes.
        seed: Master seed for the stream layout.
        x0: Common initial loss level (default 0: no initial defaults).
        initial_law: Optional initial pmf over {0..m} instead of x0.
        forced_recompute: See ParticleSystem; equivalence-testing aid.
        compensated: Kahan-compensated incremental fsum updates.
        record_y_grid: Attach per-particle factor values on the grid.
        check_invariants: Collect EngineDiagnostics probes.
        return_diagnostics: Also return the diagnostics object.

    Returns:
        List of n PathRecord (and the EngineDiagnostics when requested).

    Raises:
        ConfigError: Invalid parameters or options.
    """
    system = ParticleSystem(
        params, li, dynamics, n, d, seed, algorithm=algorithm, x0=x0,
        initial_law=initial_law, forced_recompute=forced_recompute,
        compensated=compensated, record_y_grid=record_y_grid,
        check_invariants=check_invariants)
    system.run_to_horizon()
    records = system.collect_records()
    if return_diagnostics:
        return records, system.diagnostics
    return records


@dataclass(frozen=True)
class SystemSpec:
    """Frozen bundle of everything needed to run one system at given (n, seed).

    Used by the convergence harness to rerun the same model at many sizes.
    """

    params: ModelParams
    li: LocalIntensity
    dynamics: FactorDynamics
    d: int
    algorithm: str = "improved"
    x0: int = 0
    initial_law: tuple[float, ...] | None = None

    def run(self, n: int, seed, **kwargs) -> list[PathRecord]:
        return run_system(self.params, self.li, self.dynamics, n, self.d,
                          algorithm=self.algorithm, seed=seed, x0=self.x0,
                          initial_law=self.initial_law, **kwargs)
