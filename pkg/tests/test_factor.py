"""Tests for factor dynamics: steppers, jump map, and sampling laws.

Oracles used here:

- sigma = 0 reduces every CIR step to the deterministic relaxation
  theta + (y - theta) e^{-kappa h}, checked in closed form;
- the exact conditional-law sampler (noncentral chi-square via Poisson-Gamma)
  provides an independent route to the same transition law as the
  second-order scheme, compared at the moment level;
- closed-form conditional mean/variance formulas back the Monte-Carlo checks.
"""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slisim import (
    Cir,
    DomainError,
    GenericEuler,
    LinearDecayIntensity,
    LogNormalJump,
    apply_jump,
    make_generator,
    step_cir,
    step_generic,
    step_lognormal,
)
from slisim.factor import (
    FactorState,
    _cir_step_one,
    cir_exact_values,
    cir_mean,
    cir_step_values,
    cir_variance,
    lognormal_z_step,
    make_stepper,
)
from slisim.rngs import ROLE_BROWNIAN, SystemStreams


def li_theta(theta: float, m: int = 10) -> LinearDecayIntensity:
    """Linear-decay intensity whose level-0 value is exactly theta."""
    return LinearDecayIntensity(lambda_bar=theta, m=m)


# ---------------------------------------------------------------------------
# Parameter validation
# ---------------------------------------------------------------------------


def test_dynamics_constructor_checks():
    with pytest.raises(DomainError):
        Cir(kappa=1.0, sigma=0.3, y0=0.0)
    with pytest.raises(DomainError):
        Cir(kappa=-1.0, sigma=0.3, y0=1.0)
    with pytest.raises(DomainError):
        Cir(kappa=1.0, sigma=-0.3, y0=1.0)
    with pytest.raises(DomainError):
        Cir(kappa=1.0, sigma=0.3, y0=1.0, scheme="euler")
    with pytest.raises(DomainError):
        LogNormalJump(a=1.0, sigma=0.3, gamma=-0.5, y0=1.0)
    with pytest.raises(DomainError):
        LogNormalJump(a=1.0, sigma=0.3, gamma=1.0, y0=1.0, drift_mode="x")
    with pytest.raises(DomainError):
        GenericEuler(drift=lambda t, x, y: 0.0, vol=lambda t, x, y: 0.0,
                     jump=lambda t, x, y: 0.0, y0=-1.0)


def test_lognormal_drift_constant_sign():
    ito = LogNormalJump(a=1.0, sigma=0.4, gamma=1.0, y0=1.0)
    ou = LogNormalJump(a=1.0, sigma=0.4, gamma=1.0, y0=1.0,
                       drift_mode="paper-ou-drift")
    assert ito.z_drift_const == pytest.approx(-0.08, rel=1e-12)
    assert ou.z_drift_const == pytest.approx(0.08, rel=1e-12)


# ---------------------------------------------------------------------------
# CIR: deterministic limits and closed-form moments
# ---------------------------------------------------------------------------


def test_step_cir_sigma_zero_is_exact_relaxation():
    dyn = Cir(kappa=1.0, sigma=0.0, y0=1.0)
    li = li_theta(2.0)
    rng = make_generator(0, ROLE_BROWNIAN, 0)
    for h in (0.01, 0.1, 0.5, 2.0):
        out = step_cir(FactorState(1.0, 0.0), 0, 0.0, h, dyn, li, rng)
        assert out.t_last == h
        assert abs(out.y - (2.0 - math.exp(-h))) < 1e-14


def test_step_cir_sigma_zero_fixed_point():
    dyn = Cir(kappa=2.0, sigma=0.0, y0=2.5)
    li = li_theta(2.5)
    rng = make_generator(0, ROLE_BROWNIAN, 0)
    out = step_cir(FactorState(2.5, 0.0), 0, 0.0, 0.7, dyn, li, rng)
    assert abs(out.y - 2.5) < 1e-13


def test_cir_mean_variance_kappa_zero_limits():
    # kappa = 0 is constant-rate drift: dY = a dt + sigma sqrt(Y) dW, so
    # E = y + a h and Var = sigma^2 (y h + a h^2 / 2).
    assert cir_mean(1.0, 2.0, 0.0, 0.5) == 2.0
    assert abs(cir_variance(1.0, 2.0, 0.0, 0.3, 0.5)
               - 0.09 * (0.5 + 0.25)) < 1e-15


def test_cir_scheme_one_step_moments_match_closed_form():
    # Squared-Gaussian branch (sigma^2 <= 4a). 1e6 draws, 3 SE on the mean.
    y, a, kappa, sigma, h = 1.0, 2.5, 1.0, 0.3, 0.01
    rng = np.random.default_rng(910)
    z = rng.standard_normal(1_000_000)
    ys = cir_step_values(np.full(z.size, y), np.full(z.size, a),
                         kappa, sigma, np.full(z.size, h), z)
    mean_se = ys.std(ddof=1) / math.sqrt(ys.size)
    assert abs(ys.mean() - cir_mean(y, a, kappa, h)) < 3.0 * mean_se
    var = ys.var(ddof=1)
    var_se = math.sqrt(max(np.mean((ys - ys.mean()) ** 4) - var**2, 0.0)
                       / ys.size)
    assert abs(var - cir_variance(y, a, kappa, sigma, h)) < 4.0 * var_se


@pytest.mark.parametrize(
    "y,a,sigma",
    [
        (1.0, 2.5, 0.3),   # squared-Gaussian branch
        (5.0, 0.5, 2.0),   # three-point branch (c2 < 0, y large)
        (0.05, 0.5, 2.0),  # two-point branch (c2 < 0, y small)
    ],
)
def test_cir_scheme_matches_exact_sampler(y, a, sigma):
    # Dual route: the second-order scheme and the exact conditional-law
    # sampler must produce the same transition law; compare two moments.
    kappa, h, n = 1.0, 0.1, 1_000_000
    rng = np.random.default_rng(27_182)
    ys_scheme = cir_step_values(np.full(n, y), np.full(n, a), kappa, sigma,
                                np.full(n, h), rng.standard_normal(n))
    ys_exact = cir_exact_values(np.full(n, y), np.full(n, a), kappa, sigma,
                                np.full(n, h), np.random.default_rng(31_415))
    assert np.all(ys_scheme > 0.0)
    assert np.all(ys_exact > 0.0)
    m_exact = cir_mean(y, a, kappa, h)
    v_exact = cir_variance(y, a, kappa, sigma, h)
    # Exact sampler against closed forms (unbiased).
    se = ys_exact.std(ddof=1) / math.sqrt(n)
    assert abs(ys_exact.mean() - m_exact) < 3.5 * se
    # Scheme against closed forms; weak-second-order bias O(h^3) is far
    # below the Monte-Carlo resolution at this step size.
    se_s = ys_scheme.std(ddof=1) / math.sqrt(n)
    assert abs(ys_scheme.mean() - m_exact) < 3.5 * se_s
    for sample in (ys_exact, ys_scheme):
        var = sample.var(ddof=1)
        var_se = math.sqrt(
            max(np.mean((sample - sample.mean()) ** 4) - var**2, 0.0) / n)
        assert abs(var - v_exact) < 5.0 * var_se


def test_cir_exact_sigma_zero_is_relaxation():
    out = cir_exact_values(np.array([1.0]), np.array([2.0]), 1.0, 0.0,
                           np.array([0.3]), np.random.default_rng(1))
    assert abs(out[0] - (2.0 - math.exp(-0.3))) < 1e-14


@given(
    y=st.floats(1e-6, 50.0),
    a=st.floats(0.0, 10.0),
    kappa=st.floats(0.0, 5.0),
    sigma=st.floats(0.0, 5.0),
    h=st.floats(1e-6, 2.0),
    z=st.floats(-8.0, 8.0),
)
@settings(max_examples=300, deadline=None)
def test_cir_step_positive_and_scalar_matches_vector(y, a, kappa, sigma, h, z):
    scalar = _cir_step_one(y, a, kappa, sigma, h, z)
    vector = cir_step_values(np.array([y]), np.array([a]), kappa, sigma,
                             np.array([h]), np.array([z]))[0]
    assert scalar > 0.0
    assert math.isfinite(scalar)
    assert vector == pytest.approx(scalar, rel=1e-12, abs=1e-300)


def test_cir_kernels_survive_subnormal_kappa():
    # kappa*h can underflow to zero inside expm1 while kappa divides
    # cleanly; psi must fall back to its series (~h), not collapse to 0.
    k = 5e-324
    assert cir_mean(1.0, 1.0, k, 1.0) == pytest.approx(2.0, rel=1e-12)
    assert _cir_step_one(1.0, 1.0, k, 0.0, 1.0, 0.0) == pytest.approx(
        2.0, rel=1e-12)
    out = cir_step_values(np.array([1.0]), np.array([1.0]), k, 0.0,
                          np.array([1.0]), np.array([0.0]))
    assert out[0] == pytest.approx(2.0, rel=1e-12)
    # Half-step psi inside the sigma > 0 branch hits the same underflow.
    noisy = cir_step_values(np.array([1.0, 1.0]), np.array([1.0, 1.0]),
                            k, 0.5, np.array([1.0, 1.0]),
                            np.array([1.0, -1.0]))
    assert np.all(noisy > 0.0) and np.all(np.isfinite(noisy))
    for z in (-1.0, 0.0, 1.0):
        assert _cir_step_one(1.0, 1.0, k, 0.5, 1.0, z) == pytest.approx(
            cir_step_values(np.array([1.0]), np.array([1.0]), k, 0.5,
                            np.array([1.0]), np.array([z]))[0], rel=1e-12)


# ---------------------------------------------------------------------------
# Step bookkeeping: draw counts, domain checks, h = 0
# ---------------------------------------------------------------------------


def step_and_count(stepfn) -> int:
    """Run stepfn(rng) and return how many normals it consumed."""
    rng = make_generator(1234, ROLE_BROWNIAN, 0)
    stepfn(rng)
    probe = float(rng.standard_normal())
    ref = make_generator(1234, ROLE_BROWNIAN, 0)
    draws = [float(ref.standard_normal()) for _ in range(8)]
    return draws.index(probe)


def test_cir_step_consumes_exactly_one_normal():
    li = li_theta(2.0)
    dyn = Cir(kappa=1.0, sigma=0.3, y0=1.0)
    n = step_and_count(
        lambda g: step_cir(FactorState(1.0, 0.0), 0, 0.0, 0.5, dyn, li, g))
    assert n == 1


def test_cir_step_sigma_zero_consumes_no_draws():
    li = li_theta(2.0)
    dyn = Cir(kappa=1.0, sigma=0.0, y0=1.0)
    n = step_and_count(
        lambda g: step_cir(FactorState(1.0, 0.0), 0, 0.0, 0.5, dyn, li, g))
    assert n == 0


def test_zero_length_step_consumes_no_draws():
    li = li_theta(2.0)
    dyn = Cir(kappa=1.0, sigma=0.3, y0=1.0)
    n = step_and_count(
        lambda g: step_cir(FactorState(1.0, 0.2), 0, 0.2, 0.2, dyn, li, g))
    assert n == 0
    lndyn = LogNormalJump(a=1.0, sigma=0.3, gamma=1.0, y0=1.0)
    n = step_and_count(
        lambda g: step_lognormal(FactorState(1.0, 0.2), 0.2, 0.2, lndyn, g))
    assert n == 0


def test_lognormal_and_generic_draw_counts():
    lndyn = LogNormalJump(a=1.0, sigma=0.3, gamma=1.0, y0=1.0)
    n = step_and_count(
        lambda g: step_lognormal(FactorState(1.0, 0.0), 0.0, 0.5, lndyn, g))
    assert n == 1
    gen = GenericEuler(drift=lambda t, x, y: -y, vol=lambda t, x, y: 0.0,
                       jump=lambda t, x, y: 0.0, y0=1.0)
    n = step_and_count(
        lambda g: step_generic(FactorState(1.0, 0.0), 0, 0.0, 0.5, gen, g))
    assert n == 1  # generic steps always consume one draw


def test_step_domain_errors():
    li = li_theta(2.0)
    dyn = Cir(kappa=1.0, sigma=0.3, y0=1.0)
    rng = make_generator(0, ROLE_BROWNIAN, 0)
    with pytest.raises(DomainError):
        step_cir(FactorState(0.0, 0.0), 0, 0.0, 0.5, dyn, li, rng)
    with pytest.raises(DomainError):
        step_cir(FactorState(1.0, 0.5), 0, 0.5, 0.4, dyn, li, rng)
    lndyn = LogNormalJump(a=1.0, sigma=0.3, gamma=1.0, y0=1.0)
    with pytest.raises(DomainError):
        step_lognormal(FactorState(-1.0, 0.0), 0.0, 0.5, lndyn, rng)


# ---------------------------------------------------------------------------
# Log-normal factor
# ---------------------------------------------------------------------------


def test_step_lognormal_fixed_point_and_deterministic_value():
    dyn = LogNormalJump(a=1.0, sigma=0.0, gamma=1.0, y0=1.0)
    rng = make_generator(0, ROLE_BROWNIAN, 0)
    out = step_lognormal(FactorState(1.0, 0.0), 0.0, 0.7, dyn, rng)
    assert out.y == 1.0  # log Y = 0 is the sigma = 0 equilibrium
    out = step_lognormal(FactorState(math.e, 0.0), 0.0, 0.1, dyn, rng)
    assert out.y == math.exp(0.9)


def test_lognormal_drift_modes_shift_by_sigma_sq_h():
    ito = LogNormalJump(a=1.0, sigma=0.4, gamma=1.0, y0=2.0)
    ou = LogNormalJump(a=1.0, sigma=0.4, gamma=1.0, y0=2.0,
                       drift_mode="paper-ou-drift")
    h = 0.25
    y_ito = step_lognormal(FactorState(2.0, 0.0), 0.0, h, ito,
                           make_generator(3, ROLE_BROWNIAN, 0)).y
    y_ou = step_lognormal(FactorState(2.0, 0.0), 0.0, h, ou,
                          make_generator(3, ROLE_BROWNIAN, 0)).y
    assert abs(math.log(y_ou) - math.log(y_ito) - 0.16 * h) < 1e-14


def test_lognormal_euler_mean_matches_ou_formula():
    # Z = log Y follows an OU process; after t = 0.1 (100 Euler steps) the
    # sample mean of Z must match (const/a)(1 - e^{-a t}) within 3 SE.
    a, sigma, t, steps, n = 1.0, 0.3, 0.1, 100, 1_000_000
    const = -0.5 * sigma * sigma
    h = t / steps
    rng = np.random.default_rng(161_803)
    z = np.zeros(n)
    for _ in range(steps):
        z = lognormal_z_step(z, a, const, sigma, h, rng.standard_normal(n))
    target = (const / a) * (1.0 - math.exp(-a * t))
    se = z.std(ddof=1) / math.sqrt(n)
    assert abs(z.mean() - target) < 3.0 * se


# ---------------------------------------------------------------------------
# Jump map
# ---------------------------------------------------------------------------


def test_apply_jump_lognormal_scales():
    dyn = LogNormalJump(a=1.0, sigma=0.3, gamma=1.0, y0=1.0)
    out = apply_jump(FactorState(0.8, 0.3), 0.3, 5, dyn)
    assert abs(out.y - 1.6) < 1e-15
    assert out.t_last == 0.3


def test_apply_jump_cir_unchanged():
    dyn = Cir(kappa=1.0, sigma=0.3, y0=1.0)
    state = FactorState(1.7, 0.4)
    assert apply_jump(state, 0.4, 2, dyn) is state


def test_apply_jump_generic_additive():
    dyn = GenericEuler(drift=lambda t, x, y: 0.0, vol=lambda t, x, y: 0.0,
                       jump=lambda t, x, y: -0.5 * y, y0=4.0)
    out = apply_jump(FactorState(4.0, 0.1), 0.1, 0, dyn)
    assert out.y == 2.0


# ---------------------------------------------------------------------------
# Engine-facing bulk steppers
# ---------------------------------------------------------------------------


def test_make_stepper_rejects_exact_scheme_and_unknown_dynamics():
    li = li_theta(2.0)
    with pytest.raises(DomainError):
        make_stepper(Cir(kappa=1.0, sigma=0.3, y0=1.0, scheme="exact"), li, 4)
    with pytest.raises(DomainError):
        make_stepper(object(), li, 4)


@pytest.mark.parametrize(
    "dyn",
    [
        Cir(kappa=1.0, sigma=0.3, y0=1.0),
        LogNormalJump(a=1.0, sigma=0.3, gamma=1.0, y0=1.0),
        GenericEuler(drift=lambda t, x, y: 1.0 - y, vol=lambda t, x, y: 0.2,
                     jump=lambda t, x, y: 0.1, y0=1.0),
    ],
    ids=["cir", "lognormal", "generic"],
)
def test_advance_all_matches_advance_one(dyn):
    # The vectorized full-population step and the scalar per-particle step
    # draw from the same per-particle streams and apply the same formulas.
    li = li_theta(2.0, m=10)
    n = 7
    xs = np.arange(n) % 3
    t_last = np.zeros(n)
    s_vec = make_stepper(dyn, li, n)
    s_one = make_stepper(dyn, li, n)
    vec_streams = SystemStreams(55, n=n, rate=1.0)
    one_streams = SystemStreams(55, n=n, rate=1.0)
    for t_to in (0.25, 0.5):
        s_vec.advance_all(xs, t_last, t_to, vec_streams)
        for i in range(n):
            s_one.advance_one(i, int(xs[i]), float(t_last[i]), t_to,
                              one_streams)
        t_last[:] = t_to
        np.testing.assert_allclose(s_vec.ys, s_one.ys, rtol=1e-12)


def test_advance_all_skips_particles_already_at_target():
    li = li_theta(2.0, m=10)
    dyn = LogNormalJump(a=1.0, sigma=0.3, gamma=1.0, y0=1.0)
    n = 4
    stepper = make_stepper(dyn, li, n)
    streams = SystemStreams(10, n=n, rate=1.0)
    t_last = np.array([0.0, 0.5, 0.0, 0.5])
    ys_before = stepper.ys.copy()
    stepper.advance_all(np.zeros(n, dtype=int), t_last, 0.5, streams)
    assert stepper.ys[1] == ys_before[1]
    assert stepper.ys[3] == ys_before[3]
    assert stepper.ys[0] != ys_before[0]
    # Untouched particles kept their streams at the head.
    ref = SystemStreams(10, n=n, rate=1.0)
    assert streams.normal_one(1) == ref.normal_one(1)


def test_lognormal_stepper_jump_matches_jump_map():
    li = li_theta(2.0, m=10)
    dyn = LogNormalJump(a=1.0, sigma=0.3, gamma=0.7, y0=1.3)
    stepper = make_stepper(dyn, li, 2)
    stepper.jump_one(0, 4, 0.2)
    expected = apply_jump(FactorState(1.3, 0.0), 0.2, 4, dyn).y
    assert stepper.ys[0] == pytest.approx(expected, rel=1e-15)
    assert stepper.ys[1] == 1.3
    np.testing.assert_allclose(np.exp(stepper.zs), stepper.ys, rtol=1e-15)


def test_cir_stepper_jump_is_noop():
    li = li_theta(2.0, m=10)
    stepper = make_stepper(Cir(kappa=1.0, sigma=0.3, y0=1.0), li, 2)
    before = stepper.ys.copy()
    stepper.jump_one(0, 1, 0.1)
    np.testing.assert_array_equal(stepper.ys, before)
