"""Monte-Carlo convergence studies over many independent particle systems.

For a pathwise estimator (a terminal-pmf point, the Asian payoff mean, or
the mean longest jump-free interval), the harness runs `reps` independent
systems at each particle count N, measures the mean squared error against a
high-accuracy reference, and fits

    -1/2 * log(mse(N)) = alpha * log(N) + beta + eps_N

by ordinary least squares; alpha near 1/2 is the expected Monte-Carlo rate.
A companion routine emits the centered/renormalized per-system estimates so
the empirical near-Gaussianity of the estimator can be inspected.

Every system's seed is derived from (master seed, role, N-index, rep), so
results are bit-reproducible and independent of execution order or thread
count.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from .errors import DomainError
from .estimators import ScalarEstimate, asian_payoff, tau_value
from .particles import PathRecord, SystemSpec
from .rngs import ROLE_CLT, ROLE_REFERENCE, ROLE_STUDY, seed_tuple

__all__ = [
    "EstimatorSpec",
    "ConvergenceStudy",
    "RegressionResult",
    "StudyResult",
    "CltReport",
    "system_statistic",
    "fit_loglog",
    "build_reference",
    "run_study",
    "run_study_multi",
    "clt_histogram",
]

_KINDS = ("pmf-point", "asian", "tau")


@dataclass(frozen=True)
class EstimatorSpec:
    """Which per-system statistic a study measures.

    kinds: "pmf-point" (fraction of particles ending at `level`), "asian"
    (mean Asian payoff at `strike`), "tau" (mean longest inter-jump waiting
    time, estimators.tau_value).
    """

    kind: str
    level: int | None = None
    strike: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise DomainError(f"estimator kind must be one of {_KINDS}, "
                              f"got {self.kind!r}")
        if self.kind == "pmf-point" and (self.level is None or self.level < 0):
            raise DomainError("pmf-point estimator needs level >= 0")
        if self.kind == "asian" and self.strike is None:
            raise DomainError("asian estimator needs a strike")


def system_statistic(records: list[PathRecord], spec: EstimatorSpec,
                     horizon: float) -> float:
    """The per-system scalar the study tracks (mean over particles)."""
    n = len(records)
    if spec.kind == "pmf-point":
        return sum(1 for r in records if r.x_terminal == spec.level) / n
    if spec.kind == "asian":
        return sum(asian_payoff(r, spec.strike, horizon) for r in records) / n
    return sum(tau_value(r, horizon) for r in records) / n


@dataclass(frozen=True)
class ConvergenceStudy:
    """Study design: particle counts, replications, estimator, reference."""

    n_values: tuple[int, ...]
    reps_per_n: int
    estimator: EstimatorSpec
    reference: ScalarEstimate | None = None

    def __post_init__(self) -> None:
        ns = tuple(int(v) for v in self.n_values)
        object.__setattr__(self, "n_values", ns)
        if len(ns) < 2 or any(b <= a for a, b in zip(ns, ns[1:])):
            raise DomainError("n_values must be >= 2 strictly increasing counts")
        if self.reps_per_n < 2:
            raise DomainError("reps_per_n must be >= 2")


@dataclass(frozen=True)
class RegressionResult:
    """OLS fit of -1/2*log(mse) against log(N)."""

    alpha: float
    beta: float
    resid_var: float


@dataclass
class StudyResult:
    """One estimator's study outcome: the (N, mse) table and the fit."""

    rows: list[tuple[int, float, int]]
    regression: RegressionResult
    excluded: list[int]
    estimator: EstimatorSpec
    reference: ScalarEstimate
    estimates: np.ndarray | None = None  # (len(n_values), reps) raw stats


@dataclass
class CltReport:
    """Centered/renormalized per-system estimates with moment summary."""

    sample: np.ndarray
    skewness: float
    excess_kurtosis: float
    mean: float
    std: float
    degenerate: bool


def fit_loglog(n_values, mses) -> RegressionResult:
    """OLS of -1/2*log(mse) on log(N).

    Raises:
        DomainError: Fewer than two points or a nonpositive mse (callers
            exclude degenerate points before fitting).
    """
    n_values = np.asarray(n_values, dtype=float)
    mses = np.asarray(mses, dtype=float)
    if n_values.size != mses.size or n_values.size < 2:
        raise DomainError("need >= 2 (N, mse) points to fit")
    if np.any(mses <= 0.0):
        raise DomainError("mse values must be > 0 for the log-log fit")
    x = np.log(n_values)
    y = -0.5 * np.log(mses)
    alpha, beta = np.polyfit(x, y, 1)
    resid = y - (alpha * x + beta)
    return RegressionResult(alpha=float(alpha), beta=float(beta),
                            resid_var=float(np.mean(resid * resid)))


def build_reference(sys_spec: SystemSpec, estimator: EstimatorSpec,
                    n_large: int, reps: int, seed) -> ScalarEstimate:
    """High-accuracy reference: pooled mean over independent large systems.

    Args:
        sys_spec: Model/engine bundle.
        estimator: Statistic to average.
        n_large: Particles per reference system (much larger than the
            study's largest N).
        reps: Independent reference systems, >= 2.

    Returns:
        ScalarEstimate with value the pooled mean and stderr the standard
        error across systems.
    """
    if reps < 2:
        raise DomainError("reference needs reps >= 2 for a standard error")
    base = seed_tuple(seed)
    horizon = sys_spec.params.horizon
    vals = np.empty(reps)
    for rep in range(reps):
        records = sys_spec.run(n_large, base + (ROLE_REFERENCE, rep))
        vals[rep] = system_statistic(records, estimator, horizon)
    return ScalarEstimate(value=float(vals.mean()),
                          stderr=float(vals.std(ddof=1) / np.sqrt(reps)),
                          n_samples=reps * n_large)


def _study_task(args):
    sys_spec, n, run_seed, specs, horizon = args
    records = sys_spec.run(n, run_seed)
    return [system_statistic(records, spec, horizon) for spec in specs]


def run_study_multi(sys_spec: SystemSpec, n_values, reps: int,
                    estimators: dict[str, EstimatorSpec],
                    references: dict[str, ScalarEstimate], seed, *,
                    threads: int = 1,
                    keep_estimates: bool = False) -> dict[str, StudyResult]:
    """Run one set of simulations and evaluate several estimators on it.

    All estimators in `estimators` are measured on the same runs (they are
    statistics of the same paths), so studies that share a model pay for the
    simulation once. Results are bit-reproducible for any thread count.

    Args:
        sys_spec: Model/engine bundle.
        n_values: Strictly increasing particle counts.
        reps: Replications per count, >= 2.
        estimators: Named estimator specs.
        references: Reference estimate per name (same keys).
        seed: Master seed.
        threads: Worker processes for replications (1 = in-process).
        keep_estimates: Attach the raw (n, rep) statistic matrix per name.

    Returns:
        StudyResult per name, with mse rows, exclusions, and the OLS fit.
    """
    study_shape = ConvergenceStudy(tuple(n_values), reps,
                                   next(iter(estimators.values())))
    ns = study_shape.n_values
    if set(estimators) != set(references):
        raise DomainError("estimators and references must share keys")
    base = seed_tuple(seed)
    horizon = sys_spec.params.horizon
    specs = list(estimators.values())
    names = list(estimators.keys())
    tasks = [(sys_spec, n, base + (ROLE_STUDY, i_n, rep), specs, horizon)
             for i_n, n in enumerate(ns) for rep in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(_study_task, tasks, chunksize=4))
    else:
        flat = [_study_task(t) for t in tasks]
    stats = np.array(flat).reshape(len(ns), reps, len(names))

    out: dict[str, StudyResult] = {}
    for k, name in enumerate(names):
        ref = references[name]
        errs = stats[:, :, k] - ref.value
        mses = np.mean(errs * errs, axis=1)
        rows = [(int(n), float(mse), reps) for n, mse in zip(ns, mses)]
        kept = [(n, mse) for n, mse in zip(ns, mses) if mse > 0.0]
        excluded = [int(n) for n, mse in zip(ns, mses) if mse <= 0.0]
        if excluded:
            warnings.warn(
                f"study[{name}]: excluded N={excluded} with zero mse from the fit",
                RuntimeWarning, stacklevel=2)
        reg = fit_loglog([n for n, _ in kept], [m for _, m in kept])
        out[name] = StudyResult(
            rows=rows, regression=reg, excluded=excluded,
            estimator=estimators[name], reference=ref,
            estimates=stats[:, :, k].copy() if keep_estimates else None)
    return out


def run_study(study: ConvergenceStudy, sys_spec: SystemSpec, seed, *,
              threads: int = 1) -> StudyResult:
    """Run a single-estimator study (see run_study_multi)."""
    if study.reference is None:
        raise DomainError("study.reference must be built before run_study")
    return run_study_multi(
        sys_spec, study.n_values, study.reps_per_n,
        {"estimator": study.estimator}, {"estimator": study.reference},
        seed, threads=threads)["estimator"]


def clt_histogram(sys_spec: SystemSpec, estimator: EstimatorSpec,
                  n_particles: int, n_systems: int, seed, *,
                  threads: int = 1) -> CltReport:
    """Centered and renormalized per-system estimates plus moment report.

    Args:
        sys_spec: Model/engine bundle.
        estimator: Statistic per system.
        n_particles: Particles per system.
        n_systems: Independent systems, >= 100.
        seed: Master seed.
        threads: Worker processes (1 = in-process).

    Returns:
        CltReport whose sample has mean 0 and variance 1 (ddof=1) unless the
        raw estimates are degenerate (zero variance), in which case the
        sample is left centered-only and the moments are NaN.
    """
    if n_systems < 100:
        raise DomainError("clt_histogram needs n_systems >= 100")
    base = seed_tuple(seed)
    horizon = sys_spec.params.horizon
    tasks = [(sys_spec, n_particles, base + (ROLE_CLT, k), [estimator], horizon)
             for k in range(n_systems)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(_study_task, tasks, chunksize=4))
    else:
        flat = [_study_task(t) for t in tasks]
    vals = np.array([v[0] for v in flat])
    mean = float(vals.mean())
    std = float(vals.std(ddof=1))
    if std == 0.0:
        return CltReport(sample=vals - mean, skewness=float("nan"),
                         excess_kurtosis=float("nan"), mean=mean, std=std,
                         degenerate=True)
    sample = (vals - mean) / std
    return CltReport(sample=sample,
                     skewness=float(sstats.skew(sample)),
                     excess_kurtosis=float(sstats.kurtosis(sample)),
                     mean=mean, std=std, degenerate=False)
