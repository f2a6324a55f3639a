"""Baseline loss-only engine: the time-inhomogeneous pure-jump chain.

Without a factor process, the loss count X jumps from x to x+1 at rate
lambda(t, x). Paths are simulated by thinning a rate-lambda_bar Poisson
stream: each proposal at time t is accepted with probability
lambda(t-, x)/lambda_bar, which is exact because lambda_bar bounds the
intensity everywhere.

For the linear-decay family lambda(t, x) = lambda_bar*(1 - x/m) started at
X_0 = 0, names default independently at rate lambda_bar/m each, so
X_T ~ Binomial(m, 1 - exp(-lambda_bar*T/m)). That closed form is the oracle
the simulators are calibrated against.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.random import Generator
from scipy import stats

from .errors import DomainError, UnsupportedModelError
from .model import LinearDecayIntensity, LocalIntensity, ModelParams
from .particles import PathRecord
from .rngs import ROLE_LI_PATH, make_generator

__all__ = [
    "LiPath",
    "simulate_li_path",
    "simulate_li_paths",
    "binomial_default_probability",
    "binomial_pmf",
    "binomial_oracle",
]

# A baseline path carries the same observables as a particle path.
LiPath = PathRecord


def simulate_li_path(params: ModelParams, li: LocalIntensity, x0: int,
                     rng: Generator) -> PathRecord:
    """One path of the baseline chain on [0, horizon] by thinning.

    Args:
        params: Model parameters (lambda_bar must bound li everywhere).
        li: Local-intensity family.
        x0: Initial loss level in {0..m}.
        rng: Source of the proposal exponentials and acceptance uniforms.

    Returns:
        PathRecord with the accepted jump times and terminal level.

    Raises:
        DomainError: If x0 lies outside {0..m}.
    """
    m = params.m
    if not 0 <= x0 <= m:
        raise DomainError(f"x0={x0} outside {{0..{m}}}")
    lam_bar = params.lambda_bar
    horizon = params.horizon
    x = x0
    jumps: list[float] = []
    t = 0.0
    if lam_bar > 0.0:
        while x < m:
            t += -math.log(rng.random()) / lam_bar
            if t > horizon:
                break
            if rng.random() * lam_bar < li.left_value(t, x):
                x += 1
                jumps.append(t)
    return PathRecord(jump_times=jumps, x_initial=x0, x_terminal=x)


def simulate_li_paths(params: ModelParams, li: LocalIntensity, x0: int,
                      n_paths: int, seed) -> list[PathRecord]:
    """Independent baseline paths, one stream per path index."""
    return [
        simulate_li_path(params, li, x0, make_generator(seed, ROLE_LI_PATH, k))
        for k in range(n_paths)
    ]


def binomial_default_probability(params: ModelParams, t: float) -> float:
    """Per-name default probability 1 - exp(-lambda_bar*t/m) at time t."""
    return -math.expm1(-params.lambda_bar * t / params.m)


def binomial_pmf(params: ModelParams, t: float,
                 li: LocalIntensity | None = None) -> np.ndarray:
    """Closed-form pmf of X_t under linear decay from X_0 = 0.

    Args:
        params: Model parameters.
        t: Evaluation time in [0, horizon].
        li: When given, checked to actually be the linear-decay family with
            matching (lambda_bar, m); the closed form is wrong otherwise.

    Returns:
        Array of length m+1 with Binomial(m, 1-exp(-lambda_bar*t/m)) weights.

    Raises:
        UnsupportedModelError: li is supplied and is not matching linear decay.
    """
    _require_linear_decay(params, li)
    p = binomial_default_probability(params, t)
    return stats.binom.pmf(np.arange(params.m + 1), params.m, p)


def binomial_oracle(params: ModelParams, t: float, k: int,
                    li: LocalIntensity | None = None) -> float:
    """P(X_t = k) under linear decay from X_0 = 0 (closed form)."""
    _require_linear_decay(params, li)
    p = binomial_default_probability(params, t)
    return float(stats.binom.pmf(k, params.m, p))


def _require_linear_decay(params: ModelParams, li: LocalIntensity | None) -> None:
    if li is None:
        return
    if not isinstance(li, LinearDecayIntensity) or li.m != params.m \
            or li.lambda_bar != params.lambda_bar:
        raise UnsupportedModelError(
            "the binomial closed form applies only to the linear-decay "
            "family with matching lambda_bar and m")
