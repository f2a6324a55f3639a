"""Tests for the convergence-study harness.

The log-log fit and the mse bookkeeping are exercised against deterministic
stand-in systems whose per-system statistic follows an exact power law, so
the expected regression output is known to machine precision; the real
particle engine is used for smoke coverage, thread-count invariance, and the
degenerate branches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest

from slisim import (
    Cir,
    ConvergenceStudy,
    DomainError,
    EstimatorSpec,
    LinearDecayIntensity,
    ModelParams,
    PathRecord,
    SystemSpec,
    build_reference,
    clt_histogram,
    fit_loglog,
    run_study,
    run_study_multi,
)
from slisim.convergence import system_statistic
from slisim.estimators import ScalarEstimate


@dataclass(frozen=True)
class _FakeParams:
    horizon: float = 1.0


class _PowerLawSpec:
    """Stand-in system whose statistic deviates from 0.5 by +-c/sqrt(n).

    The study seeds are tuples ending in (role, n_index, rep), so the
    deviation sign can alternate with the replication index; the resulting
    mse is exactly c^2/n and the fitted slope must be 1/2.
    """

    params = _FakeParams()
    c = 0.1
    zero_at: int | None = None

    def run(self, n, seed, **kwargs):
        i_n, rep = seed[-2], seed[-1]
        c = 0.0 if self.zero_at == i_n else self.c
        t = 0.5 + (-1.0) ** rep * c / math.sqrt(n)
        return [PathRecord([t], 0, 1)]


class _PowerLawSpecZeroMid(_PowerLawSpec):
    zero_at = 1


class _GaussianSpec:
    """Stand-in whose statistic is an exact Gaussian draw per system."""

    params = _FakeParams()

    def run(self, n, seed, **kwargs):
        z = float(np.random.default_rng(seed).standard_normal())
        return [PathRecord([0.5 + 0.05 * z], 0, 1)]


TAU = EstimatorSpec(kind="tau")
REF_HALF = ScalarEstimate(value=0.5, stderr=0.0, n_samples=1)


def small_system() -> SystemSpec:
    params = ModelParams(m=10, lambda_bar=2.0, f_low=0.5, f_high=2.0,
                         horizon=1.0)
    dyn = Cir(kappa=1.0, sigma=0.3, y0=1.0)
    return SystemSpec(params=params, li=LinearDecayIntensity(2.0, 10),
                      dynamics=dyn, d=10)


# ---------------------------------------------------------------------------
# Specs and the fit
# ---------------------------------------------------------------------------


def test_estimator_spec_validation():
    with pytest.raises(DomainError):
        EstimatorSpec(kind="median")
    with pytest.raises(DomainError):
        EstimatorSpec(kind="pmf-point")
    with pytest.raises(DomainError):
        EstimatorSpec(kind="pmf-point", level=-1)
    with pytest.raises(DomainError):
        EstimatorSpec(kind="asian")
    EstimatorSpec(kind="tau")
    EstimatorSpec(kind="asian", strike=0.5)
    EstimatorSpec(kind="pmf-point", level=0)


def test_convergence_study_validation():
    tau = EstimatorSpec(kind="tau")
    with pytest.raises(DomainError):
        ConvergenceStudy(n_values=(100,), reps_per_n=4, estimator=tau)
    with pytest.raises(DomainError):
        ConvergenceStudy(n_values=(100, 100), reps_per_n=4, estimator=tau)
    with pytest.raises(DomainError):
        ConvergenceStudy(n_values=(200, 100), reps_per_n=4, estimator=tau)
    with pytest.raises(DomainError):
        ConvergenceStudy(n_values=(100, 200), reps_per_n=1, estimator=tau)


def test_system_statistic_all_kinds():
    records = [PathRecord([0.3], 0, 1), PathRecord([], 0, 0)]
    assert system_statistic(records, EstimatorSpec("pmf-point", level=1),
                            1.0) == 0.5
    assert system_statistic(records, EstimatorSpec("pmf-point", level=5),
                            1.0) == 0.0
    # One jump at 0.25 from level 0: time-average of X is 0.75.
    one = [PathRecord([0.25], 0, 1)]
    assert system_statistic(one, EstimatorSpec("asian", strike=0.0),
                            1.0) == pytest.approx(0.75)
    # tau censors the final open gap: 0.6 for the jumping path, T for the
    # jump-free one.
    both = [PathRecord([0.6], 0, 1), PathRecord([], 0, 0)]
    assert system_statistic(both, TAU, 1.0) == pytest.approx(0.8)


def test_fit_loglog_exact_power_law():
    ns = [10, 100, 1000, 10000]
    mses = [0.04 / n for n in ns]
    reg = fit_loglog(ns, mses)
    assert reg.alpha == pytest.approx(0.5, abs=1e-12)
    assert reg.beta == pytest.approx(-0.5 * math.log(0.04), abs=1e-12)
    assert reg.resid_var < 1e-20


def test_fit_loglog_validation():
    with pytest.raises(DomainError):
        fit_loglog([10], [0.1])
    with pytest.raises(DomainError):
        fit_loglog([10, 20], [0.1])
    with pytest.raises(DomainError):
        fit_loglog([10, 20], [0.1, 0.0])
    with pytest.raises(DomainError):
        fit_loglog([10, 20], [0.1, -0.2])


# ---------------------------------------------------------------------------
# Studies on deterministic stand-ins
# ---------------------------------------------------------------------------


def test_run_study_multi_recovers_exact_rate():
    out = run_study_multi(_PowerLawSpec(), (4, 16, 64, 256), 6,
                          {"tau": TAU}, {"tau": REF_HALF}, seed=1,
                          keep_estimates=True)
    res = out["tau"]
    assert res.excluded == []
    for (n, mse, reps), n_expect in zip(res.rows, (4, 16, 64, 256)):
        assert n == n_expect
        assert reps == 6
        assert mse == pytest.approx(0.01 / n, rel=1e-12)
    assert res.regression.alpha == pytest.approx(0.5, abs=1e-6)
    assert res.regression.resid_var < 1e-12
    assert res.estimates.shape == (4, 6)
    np.testing.assert_allclose(
        np.mean((res.estimates - 0.5) ** 2, axis=1),
        [row[1] for row in res.rows], rtol=1e-12)


def test_run_study_multi_excludes_zero_mse_points():
    with pytest.warns(RuntimeWarning, match="excluded"):
        out = run_study_multi(_PowerLawSpecZeroMid(), (4, 9, 16), 4,
                              {"tau": TAU}, {"tau": REF_HALF}, seed=1)
    res = out["tau"]
    assert res.excluded == [9]
    assert res.rows[1][1] == 0.0
    assert res.regression.alpha == pytest.approx(0.5, abs=1e-6)


def test_run_study_multi_key_mismatch():
    with pytest.raises(DomainError):
        run_study_multi(_PowerLawSpec(), (4, 16), 4, {"a": TAU},
                        {"b": REF_HALF}, seed=1)


def test_run_study_requires_reference():
    study = ConvergenceStudy(n_values=(4, 16), reps_per_n=4, estimator=TAU)
    with pytest.raises(DomainError):
        run_study(study, _PowerLawSpec(), seed=1)
    res = run_study(
        ConvergenceStudy(n_values=(4, 16), reps_per_n=4, estimator=TAU,
                         reference=REF_HALF),
        _PowerLawSpec(), seed=1)
    assert res.regression.alpha == pytest.approx(0.5, abs=1e-6)


# ---------------------------------------------------------------------------
# Real engine: reference, smoke study, thread invariance
# ---------------------------------------------------------------------------


def test_build_reference_frozen_chain_is_exact_zero():
    params = ModelParams(m=5, lambda_bar=0.0, f_low=0.5, f_high=2.0,
                         horizon=1.0)
    spec = SystemSpec(params=params, li=LinearDecayIntensity(0.0, 5),
                      dynamics=Cir(kappa=1.0, sigma=0.3, y0=1.0), d=4)
    ref = build_reference(spec, EstimatorSpec("asian", strike=0.0),
                          n_large=50, reps=3, seed=9)
    assert ref.value == 0.0
    assert ref.stderr == 0.0
    assert ref.n_samples == 150
    with pytest.raises(DomainError):
        build_reference(spec, TAU, n_large=50, reps=1, seed=9)


def test_real_engine_study_smoke():
    spec = small_system()
    ref = build_reference(spec, EstimatorSpec("pmf-point", level=0),
                          n_large=2000, reps=3, seed=100)
    assert 0.0 < ref.value < 1.0
    assert ref.stderr > 0.0
    out = run_study_multi(spec, (50, 100, 200), 6,
                          {"p0": EstimatorSpec("pmf-point", level=0)},
                          {"p0": ref}, seed=101)
    res = out["p0"]
    assert all(mse > 0.0 for _, mse, _ in res.rows)
    assert np.isfinite(res.regression.alpha)


def test_thread_count_does_not_change_results():
    spec = small_system()
    ref = {"tau": ScalarEstimate(value=0.4, stderr=0.0, n_samples=1)}
    est = {"tau": TAU}
    one = run_study_multi(spec, (20, 40), 4, est, ref, seed=7, threads=1,
                          keep_estimates=True)["tau"]
    two = run_study_multi(spec, (20, 40), 4, est, ref, seed=7, threads=2,
                          keep_estimates=True)["tau"]
    assert one.rows == two.rows
    np.testing.assert_array_equal(one.estimates, two.estimates)


# ---------------------------------------------------------------------------
# CLT histogram
# ---------------------------------------------------------------------------


def test_clt_histogram_validation():
    with pytest.raises(DomainError):
        clt_histogram(_GaussianSpec(), TAU, 10, 50, seed=1)


def test_clt_histogram_standardizes_and_looks_gaussian():
    n = 2000
    report = clt_histogram(_GaussianSpec(), TAU, 1, n, seed=42)
    assert not report.degenerate
    assert abs(float(report.sample.mean())) < 1e-12
    assert float(report.sample.std(ddof=1)) == pytest.approx(1.0, abs=1e-12)
    # Exact-Gaussian inputs: sample moments inside 3-sigma CLT bands.
    assert abs(report.skewness) < 3.0 * math.sqrt(6.0 / n)
    assert abs(report.excess_kurtosis) < 3.0 * math.sqrt(24.0 / n)


def test_clt_histogram_degenerate_statistic():
    params = ModelParams(m=5, lambda_bar=0.0, f_low=0.5, f_high=2.0,
                         horizon=1.0)
    spec = SystemSpec(params=params, li=LinearDecayIntensity(0.0, 5),
                      dynamics=Cir(kappa=1.0, sigma=0.3, y0=1.0), d=4)
    report = clt_histogram(spec, EstimatorSpec("pmf-point", level=0), 20,
                           120, seed=5)
    assert report.degenerate
    assert math.isnan(report.skewness)
    np.testing.assert_array_equal(report.sample, np.zeros(120))
    assert report.mean == 1.0
    assert report.std == 0.0
