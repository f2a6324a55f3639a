"""slisim: stochastic local intensity credit-loss simulation.

A loss count X on {0..M} jumps with intensity lambda(t-, X) * f(Y) /
E[f(Y) | X], which preserves the marginals of the baseline local-intensity
chain while the factor Y makes the path law richer. The package provides:

- the baseline chain and its closed-form binomial marginals (``li``),
- factor dynamics with positivity-preserving discretizations (``factor``),
- the interacting particle system with naive and incremental-aggregate
  thinning strategies (``particles``),
- pathwise estimators: terminal pmf, Asian payoff on the loss count, longest
  jump-free interval (``estimators``),
- the discrete-factor forward (Fokker-Planck) solver and a joint-CTMC
  cross-check sampler (``discrete``),
- a convergence-rate/regression harness (``convergence``),
- a YAML config schema and CLI (``config``, ``cli``).
"""
from __future__ import annotations

from .config import ExperimentConfig, config_hash, parse_config, \
    serialize_config
from .convergence import ConvergenceStudy, EstimatorSpec, RegressionResult, \
    build_reference, clt_histogram, fit_loglog, run_study, run_study_multi
from .discrete import FactorValues, FpTrajectory, GeneratorFamily, \
    dirac_initial, lipschitz_bound, phi, psi_plus, simulate_joint_ctmc, \
    simulate_joint_ctmc_terminals, solve_fp
from .errors import ConfigError, DomainError, InvariantViolation, \
    NumericalFailure, SlisimError, UnsupportedModelError
from .estimators import PmfEstimate, ScalarEstimate, asian_payoff, \
    gap_lengths, longest_gap, marginal_pmf, step_integral_quadrature, \
    tau_cdf, tau_value, tau_values, tv_distance
from .factor import Cir, FactorDynamics, FactorState, GenericEuler, \
    LogNormalJump, apply_jump, step_cir, step_generic, step_lognormal
from .li import binomial_default_probability, binomial_oracle, binomial_pmf, \
    simulate_li_path, simulate_li_paths
from .model import ClampF, LinearDecayIntensity, LocalIntensity, ModelParams, \
    PiecewiseConstantIntensity, ValidationReport, eval_f, eval_lambda, \
    eval_lambda_left, validate_params
from .particles import EngineDiagnostics, ParticleSystem, PathRecord, \
    SystemSpec, recompute_aggregates, run_system
from .rngs import SystemStreams, make_generator, seed_tuple

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "SlisimError", "ConfigError", "DomainError", "UnsupportedModelError",
    "InvariantViolation", "NumericalFailure",
    # model
    "ModelParams", "LocalIntensity", "LinearDecayIntensity",
    "PiecewiseConstantIntensity", "ClampF", "ValidationReport",
    "validate_params", "eval_lambda", "eval_lambda_left", "eval_f",
    # factor
    "Cir", "LogNormalJump", "GenericEuler", "FactorDynamics", "FactorState",
    "step_cir", "step_lognormal", "step_generic", "apply_jump",
    # baseline chain
    "simulate_li_path", "simulate_li_paths", "binomial_pmf",
    "binomial_oracle", "binomial_default_probability",
    # particle engine
    "ParticleSystem", "PathRecord", "SystemSpec", "EngineDiagnostics",
    "run_system", "recompute_aggregates",
    # rng streams
    "SystemStreams", "make_generator", "seed_tuple",
    # estimators
    "PmfEstimate", "ScalarEstimate", "marginal_pmf", "asian_payoff",
    "gap_lengths", "longest_gap", "tau_value", "tau_values", "tau_cdf",
    "tv_distance", "step_integral_quadrature",
    # discrete factor
    "GeneratorFamily", "FactorValues", "FpTrajectory", "phi", "psi_plus",
    "solve_fp", "dirac_initial", "lipschitz_bound", "simulate_joint_ctmc",
    "simulate_joint_ctmc_terminals",
    # convergence harness
    "EstimatorSpec", "ConvergenceStudy", "RegressionResult", "fit_loglog",
    "build_reference", "run_study", "run_study_multi", "clt_histogram",
    # config / CLI
    "ExperimentConfig", "parse_config", "serialize_config", "config_hash",
]
