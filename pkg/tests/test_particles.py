"""Tests for the interacting particle engine.

The heaviest equivalence and invariant checks run in the acceptance suite at
scale; here every event operation is pinned down at small sizes, including a
manual re-implementation of the event loop from the public operations, which
must reproduce ``run_to_horizon`` exactly.
"""
from __future__ import annotations

import math

import numpy as np
import pytest

from slisim import (
    Cir,
    ConfigError,
    DomainError,
    GenericEuler,
    InvariantViolation,
    LinearDecayIntensity,
    LogNormalJump,
    ModelParams,
    ParticleSystem,
    PathRecord,
    SystemSpec,
    binomial_pmf,
    marginal_pmf,
    recompute_aggregates,
    run_system,
    tv_distance,
)
from slisim.rngs import SystemStreams


def params_small(**overrides) -> ModelParams:
    kw = dict(m=10, lambda_bar=2.0, f_low=0.5, f_high=2.0, horizon=1.0)
    kw.update(overrides)
    return ModelParams(**kw)


def li_for(p: ModelParams) -> LinearDecayIntensity:
    return LinearDecayIntensity(lambda_bar=p.lambda_bar, m=p.m)


def lognormal() -> LogNormalJump:
    return LogNormalJump(a=1.0, sigma=0.3, gamma=1.0, y0=1.0)


def make_system(p=None, dyn=None, n=50, d=4, seed=7, **kwargs) -> ParticleSystem:
    p = p or params_small()
    return ParticleSystem(p, li_for(p), dyn or lognormal(), n, d, seed, **kwargs)


# ---------------------------------------------------------------------------
# Configuration validation
# ---------------------------------------------------------------------------


def test_config_error_names_each_failure():
    p = params_small()
    with pytest.raises(ConfigError) as err:
        ParticleSystem(p, li_for(p), lognormal(), 0, 0, seed=1,
                       algorithm="magic", x0=99)
    failures = err.value.failures
    assert any(f.startswith("particle-count:") for f in failures)
    assert any(f.startswith("grid-steps:") for f in failures)
    assert any(f.startswith("algorithm:") for f in failures)
    assert any(f.startswith("initial-level:") for f in failures)


def test_config_error_includes_model_validation():
    p = params_small(f_low=0.0)
    with pytest.raises(ConfigError) as err:
        make_system(p=p)
    assert any(f.startswith("clamp-lower:") for f in err.value.failures)


def test_initial_law_validation():
    p = params_small(m=2)
    with pytest.raises(ConfigError):
        make_system(p=p, initial_law=[0.5, 0.5])  # wrong length
    with pytest.raises(ConfigError):
        make_system(p=p, initial_law=[0.7, 0.6, -0.3])
    with pytest.raises(ConfigError):
        make_system(p=p, initial_law=[0.5, 0.2, 0.2])  # sums to 0.9


def test_initial_law_sampling_matches_law():
    p = params_small(m=2)
    law = [0.2, 0.3, 0.5]
    n = 3000
    sys_ = make_system(p=p, n=n, seed=5, initial_law=law)
    counts = np.bincount(sys_.xs_initial, minlength=3)
    for k in range(3):
        se = math.sqrt(law[k] * (1 - law[k]) / n)
        assert abs(counts[k] / n - law[k]) < 3.5 * se
    # Reproducible: the initial draw has its own stream role.
    twin = make_system(p=p, n=n, seed=5, initial_law=law)
    np.testing.assert_array_equal(sys_.xs_initial, twin.xs_initial)


# ---------------------------------------------------------------------------
# Event operations
# ---------------------------------------------------------------------------


def test_propose_next_event_reproduces_system_stream():
    sys_ = make_system(n=10, seed=7)
    twin = SystemStreams(7, 10, sys_.proposal_rate, proposal_block=4096)
    es, ids = twin.refill_proposals()
    assert sys_.propose_next_event() == (es[0], ids[0])
    t2, i2 = sys_.propose_next_event()
    assert t2 == es[0] + es[1]
    assert i2 == ids[1]


def test_proposal_rate_formula():
    p = params_small()
    sys_ = make_system(p=p, n=50)
    assert sys_.proposal_rate == 50 * p.lambda_bar * p.f_high / p.f_low


def test_acceptance_ratio_zero_at_top_level():
    p = params_small()
    sys_ = make_system(p=p, x0=p.m)
    assert sys_.acceptance_ratio(0.5, 0) == 0.0


def test_acceptance_ratio_constant_f_reduces_to_li_thinning():
    # With f_low = f_high the factor cancels: R = lambda(t, x)/lambda_bar.
    p = params_small(m=4, f_low=2.0, f_high=2.0)
    for x0, expected in [(0, 1.0), (1, 0.75), (3, 0.25)]:
        sys_ = make_system(p=p, x0=x0, dyn=Cir(kappa=1.0, sigma=0.3, y0=1.0))
        r = sys_.acceptance_ratio(0.2, 0)
        assert r == pytest.approx(expected, rel=1e-12)
        assert r <= 1.0


def test_acceptance_ratio_never_above_one_and_naive_matches_forced():
    sys_a = make_system(n=40, seed=3, algorithm="naive")
    sys_b = make_system(n=40, seed=3, algorithm="improved",
                        forced_recompute=True)
    for tp in np.linspace(0.01, 0.9, 25):
        for i in (0, 7, 39):
            ra = sys_a.acceptance_ratio(tp, i)
            rb = sys_b.acceptance_ratio(tp, i)
            assert ra == rb  # same recompute route, bitwise
            assert 0.0 <= ra <= 1.0


def test_acceptance_ratio_rejects_nonpositive_fsum():
    sys_ = make_system(n=5)
    sys_.fsum[0] = 0.0
    with pytest.raises(InvariantViolation):
        sys_.acceptance_ratio(0.1, 0)


def test_apply_jump_event_bookkeeping():
    p = params_small(m=3)
    sys_ = make_system(p=p, n=5, x0=1, seed=11)
    y_before = float(sys_.stepper.ys[2])
    sys_.apply_jump_event(0.3, 2)
    assert sys_.count[1] == 4
    assert sys_.count[2] == 1
    assert sys_.xs[2] == 2
    assert sys_.xs_list[2] == 2
    assert sys_.jump_times[2] == [0.3]
    assert sys_.t_last[2] == 0.3
    # The factor advanced through the jump map: Y -> Y(1 + gamma) after the
    # diffusion step, so it cannot still equal the stored value.
    assert sys_.stepper.ys[2] != y_before
    # Table matches the definitional recompute.
    cnt, fs, _ = recompute_aggregates(sys_.xs, sys_.stepper.ys,
                                      p.f_low, p.f_high, p.m)
    np.testing.assert_array_equal(cnt, sys_.count)
    np.testing.assert_allclose(fs, sys_.fsum, rtol=0, atol=1e-12)


def test_jump_at_top_level_is_an_invariant_violation():
    p = params_small(m=2)
    sys_ = make_system(p=p, n=3, x0=2)
    with pytest.raises(InvariantViolation):
        sys_.apply_jump_event(0.1, 0)


# ---------------------------------------------------------------------------
# Grid advancement
# ---------------------------------------------------------------------------


def test_advance_to_grid_deterministic_relaxation():
    # sigma = 0 CIR: every grid advance applies the exact relaxation, and
    # composing them over several dates stays exact.
    p = params_small(lambda_bar=2.0)
    dyn = Cir(kappa=1.5, sigma=0.0, y0=1.0)
    sys_ = make_system(p=p, dyn=dyn, n=8, d=4)
    theta = 2.0  # lambda(t, 0) while no jumps have happened
    for k in (1, 2, 3):
        t = sys_.grid[k]
        sys_.advance_to_grid(t)
        expect = theta + (1.0 - theta) * math.exp(-1.5 * t)
        np.testing.assert_allclose(sys_.stepper.ys, expect, rtol=1e-12)


def test_advance_to_grid_idempotent_and_consumes_nothing_when_current():
    sys_ = make_system(n=6, seed=21)
    twin = make_system(n=6, seed=21)
    t1 = sys_.grid[1]
    sys_.advance_to_grid(t1)
    twin.advance_to_grid(t1)
    ys = sys_.stepper.ys.copy()
    fsum = list(sys_.fsum)
    sys_.advance_to_grid(t1)  # no-op: everyone already at t1
    np.testing.assert_array_equal(sys_.stepper.ys, ys)
    assert sys_.fsum == fsum
    # The repeated call consumed no Brownian draws.
    assert sys_.streams.normal_one(0) == twin.streams.normal_one(0)


def test_advance_to_grid_rejects_regression():
    sys_ = make_system(n=4)
    sys_.advance_to_grid(0.25)
    with pytest.raises(DomainError):
        sys_.advance_to_grid(0.1)


def test_advance_to_grid_rebuilds_table_definitionally():
    p = params_small()
    sys_ = make_system(p=p, n=30, seed=2)
    sys_.advance_to_grid(sys_.grid[2])
    cnt, fs, fyv = recompute_aggregates(sys_.xs, sys_.stepper.ys,
                                        p.f_low, p.f_high, p.m)
    assert sys_.count == cnt.tolist()
    assert sys_.fsum == fs.tolist()
    assert sys_.fy == fyv.tolist()


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


def test_zero_rate_run_has_no_jumps():
    p = params_small(lambda_bar=0.0)
    recs = run_system(p, li_for(p), lognormal(), 20, 4, seed=3)
    assert all(r.jump_times == [] for r in recs)
    assert all(r.x_terminal == 0 for r in recs)


def test_run_system_reproducible_and_seed_sensitive():
    p = params_small()
    a = run_system(p, li_for(p), lognormal(), 60, 4, seed=9)
    b = run_system(p, li_for(p), lognormal(), 60, 4, seed=9)
    c = run_system(p, li_for(p), lognormal(), 60, 4, seed=10)
    assert [r.jump_times for r in a] == [r.jump_times for r in b]
    assert [r.jump_times for r in a] != [r.jump_times for r in c]


def test_path_record_invariants_on_real_runs():
    p = params_small(lambda_bar=4.0, horizon=2.0)
    li = LinearDecayIntensity(lambda_bar=4.0, m=10)
    recs = run_system(p, li, lognormal(), 300, 6, seed=17)
    assert sum(len(r.jump_times) for r in recs) > 0
    for r in recs:
        jt = np.asarray(r.jump_times)
        assert r.x_terminal - r.x_initial == jt.size
        assert 0 <= r.x_terminal <= p.m
        if jt.size:
            assert jt[0] > 0.0
            assert jt[-1] <= p.horizon
            assert np.all(np.diff(jt) > 0.0)
        assert r.y_grid is None


def test_record_y_grid_shape_and_positivity():
    p = params_small()
    recs = run_system(p, li_for(p), Cir(kappa=1.0, sigma=0.3, y0=1.3),
                      25, 5, seed=4, record_y_grid=True)
    for r in recs:
        assert r.y_grid is not None
        assert r.y_grid.shape == (6,)
        assert r.y_grid[0] == 1.3
        assert np.all(r.y_grid > 0.0)


def test_naive_and_forced_recompute_are_bitwise_equal():
    p = params_small()
    kw = dict(n=200, d=5, seed=41, record_y_grid=True)
    a = run_system(p, li_for(p), lognormal(), algorithm="naive", **kw)
    b = run_system(p, li_for(p), lognormal(), algorithm="improved",
                   forced_recompute=True, **kw)
    for ra, rb in zip(a, b):
        assert ra.jump_times == rb.jump_times
        assert ra.x_terminal == rb.x_terminal
        np.testing.assert_array_equal(ra.y_grid, rb.y_grid)


def test_manual_event_loop_matches_run_to_horizon():
    # Drive one system through the public operations only; the optimized
    # loop must reproduce the exact same event sequence.
    p = params_small(m=8)
    for algorithm in ("improved", "naive"):
        auto = make_system(p=p, n=100, d=4, seed=23, algorithm=algorithm)
        manual = make_system(p=p, n=100, d=4, seed=23, algorithm=algorithm)
        auto.run_to_horizon()

        T, d = p.horizon, manual.d
        while True:
            tp, i = manual.propose_next_event()
            while manual.grid_index < d and tp > manual.grid[manual.grid_index + 1]:
                manual.advance_to_grid(manual.grid[manual.grid_index + 1])
            if tp > T:
                break
            r = manual.acceptance_ratio(tp, i)
            if manual.streams.decision_one(i) < r:
                manual.apply_jump_event(tp, i)

        assert manual.jump_times == auto.jump_times
        assert manual.xs_list == auto.xs_list
        np.testing.assert_array_equal(manual.stepper.ys, auto.stepper.ys)
        assert manual.fsum == auto.fsum


def test_final_table_equals_definitional_recompute():
    p = params_small()
    sys_ = make_system(p=p, n=150, d=5, seed=6)
    sys_.run_to_horizon()
    cnt, fs, _ = recompute_aggregates(sys_.xs, sys_.stepper.ys,
                                      p.f_low, p.f_high, p.m)
    assert sys_.count == cnt.tolist()
    assert sys_.fsum == fs.tolist()
    assert sum(sys_.count) == 150


def test_diagnostics_counters_without_invariant_checks():
    p = params_small()
    recs, diag = run_system(p, li_for(p), lognormal(), 80, 4, seed=8,
                            return_diagnostics=True)
    assert diag.n_proposals > 0
    assert diag.n_jumps == sum(len(r.jump_times) for r in recs)


def test_diagnostics_invariant_probes():
    p = params_small()
    recs, diag = run_system(p, li_for(p), lognormal(), 400, 5, seed=12,
                            check_invariants=True, return_diagnostics=True)
    assert diag.n_grid_recomputes >= 5
    assert diag.count_mismatches == 0
    assert diag.conservation_ok
    assert 0.0 <= diag.ratio_min <= diag.ratio_max <= 1.0
    assert diag.ratio_max_raw <= 1.0 + 1e-9
    assert diag.max_fsum_drift < 1e-9
    assert diag.max_bound_violation < 1e-9


def test_compensated_summation_keeps_drift_tiny():
    p = params_small(lambda_bar=4.0)
    li = LinearDecayIntensity(lambda_bar=4.0, m=10)
    _, diag = run_system(p, li, lognormal(), 400, 3, seed=13,
                         compensated=True, check_invariants=True,
                         return_diagnostics=True)
    assert diag.count_mismatches == 0
    assert diag.max_fsum_drift < 1e-10


def test_degenerate_clamp_matches_binomial_oracle():
    # f_low = f_high makes the factor irrelevant; the loss marginal must
    # fall back to the baseline binomial law.
    p = params_small(f_low=1.0, f_high=1.0)
    recs = run_system(p, li_for(p), Cir(kappa=1.0, sigma=0.3, y0=1.0),
                      5000, 20, seed=19)
    est = marginal_pmf(recs, m=p.m)
    oracle = binomial_pmf(p, p.horizon, li_for(p))
    assert tv_distance(est.probs, oracle) < 0.03
    for k in range(p.m + 1):
        se = math.sqrt(oracle[k] * (1 - oracle[k]) / 5000)
        assert abs(est.probs[k] - oracle[k]) <= 3.5 * se + 1e-12


def test_generic_dynamics_run():
    p = params_small()
    dyn = GenericEuler(drift=lambda t, x, y: 1.0 - y,
                       vol=lambda t, x, y: 0.2 * np.sqrt(np.abs(y)),
                       jump=lambda t, x, y: 0.5,
                       y0=1.0)
    recs = run_system(p, li_for(p), dyn, 100, 4, seed=29)
    assert len(recs) == 100


def test_system_spec_run_equals_run_system():
    p = params_small()
    spec = SystemSpec(params=p, li=li_for(p), dynamics=lognormal(), d=4)
    a = spec.run(50, seed=33)
    b = run_system(p, li_for(p), lognormal(), 50, 4, seed=33)
    assert [r.jump_times for r in a] == [r.jump_times for r in b]


def test_initial_law_changes_start_not_mechanics():
    p = params_small(m=3)
    law = (0.5, 0.5, 0.0, 0.0)
    recs = run_system(p, li_for(p), lognormal(), 200, 4, seed=44,
                      initial_law=law)
    assert {r.x_initial for r in recs} <= {0, 1}
    for r in recs:
        assert r.x_terminal - r.x_initial == len(r.jump_times)
