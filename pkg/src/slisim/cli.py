"""Command-line entry point: config-driven experiments with file artifacts.

Usage::

    slisim <command> --config cfg.yaml --out results/ [--seed S] [--threads K]

Commands: ``simulate`` (raw jump times), ``marginals`` (terminal pmf + oracle
comparison), ``asian`` (Asian payoff estimate), ``tau-cdf`` (longest-gap CDF
table), ``convergence`` (rate study + regression), ``fokker-planck``
(discrete-factor forward solve + CTMC cross-check), ``bench`` (naive vs
improved timings at matched seeds).

Artifacts are CSV for tables and JSON for scalar summaries; floats are
serialized with 17 significant digits, so identical (config, seed) inputs
produce byte-identical payloads on the same platform. ``manifest.json``
(config hash, version, wall-clock) is metadata and excluded from that
determinism contract. ``--seed`` overrides ``engine.seed``; ``--threads``
fans convergence replications out to worker processes without changing any
result.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_hash, parse_config
from .convergence import EstimatorSpec, build_reference, clt_histogram, \
    run_study_multi
from .discrete import FactorValues, GeneratorFamily, dirac_initial, \
    simulate_joint_ctmc_terminals, solve_fp
from .errors import ConfigError, SlisimError, UnsupportedModelError
from .estimators import asian_payoff, marginal_pmf, tau_cdf, tv_distance
from .li import binomial_pmf, simulate_li_paths
from .particles import PathRecord, SystemSpec, run_system

__all__ = ["ResultBundle", "dispatch", "main"]


@dataclass
class ResultBundle:
    """What a command produced: metadata, artifact paths, one-line summary."""

    metadata: dict[str, Any]
    artifacts: dict[str, Path]
    summary: str


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    """Plain comma-separated text; fields are numbers, never quoted."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            str(v) if isinstance(v, (int, np.integer)) else _fmt(v)
            for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _records(cfg: ExperimentConfig, seed) -> list[PathRecord]:
    """Simulate one path set under the configured process (sli or li)."""
    if cfg.experiment.get("process", "sli") == "li":
        return simulate_li_paths(cfg.params, cfg.li, cfg.engine.x0,
                                 cfg.engine.n, seed)
    return run_system(cfg.params, cfg.li, cfg.dynamics, cfg.engine.n,
                      cfg.engine.d, algorithm=cfg.engine.algorithm, seed=seed,
                      x0=cfg.engine.x0, initial_law=cfg.engine.initial_law)


def _sys_spec(cfg: ExperimentConfig) -> SystemSpec:
    return SystemSpec(params=cfg.params, li=cfg.li, dynamics=cfg.dynamics,
                      d=cfg.engine.d, algorithm=cfg.engine.algorithm,
                      x0=cfg.engine.x0, initial_law=cfg.engine.initial_law)


# ---------------------------------------------------------------------------
# Commands (each returns (artifact rows written, summary line))
# ---------------------------------------------------------------------------


def _cmd_simulate(cfg, out: Path, seed, threads: int):
    records = _records(cfg, seed)
    _write_csv(out / "terminals.csv", ["particle", "x_initial", "x_terminal"],
               ((k, r.x_initial, r.x_terminal) for k, r in enumerate(records)))
    _write_csv(out / "jumps.csv", ["particle", "jump_index", "t"],
               ((k, j, t) for k, r in enumerate(records)
                for j, t in enumerate(r.jump_times)))
    n_jumps = sum(len(r.jump_times) for r in records)
    mean_xt = sum(r.x_terminal for r in records) / len(records)
    return ["terminals.csv", "jumps.csv"], (
        f"simulate: {len(records)} paths, {n_jumps} jumps, "
        f"mean X_T = {mean_xt:.6g}")


def _cmd_marginals(cfg, out: Path, seed, threads: int):
    records = _records(cfg, seed)
    est = marginal_pmf(records, m=cfg.params.m)
    header = ["x", "prob", "stderr"]
    cols = [np.arange(cfg.params.m + 1), est.probs, est.stderr]
    tv = None
    try:
        oracle = binomial_pmf(cfg.params, cfg.params.horizon, cfg.li)
        tv = tv_distance(est.probs, oracle)
        header.append("oracle")
        cols.append(oracle)
    except UnsupportedModelError:
        pass
    _write_csv(out / "pmf.csv", header, zip(*cols))
    summary = f"marginals: {len(records)} paths"
    if tv is not None:
        summary += f", TV distance to binomial oracle = {tv:.6g}"
    return ["pmf.csv"], summary


def _cmd_asian(cfg, out: Path, seed, threads: int):
    strike = cfg.experiment.get("strike", 1.0)
    horizon = cfg.params.horizon
    records = _records(cfg, seed)
    payoffs = np.array([asian_payoff(r, strike, horizon) for r in records])
    value = float(payoffs.mean())
    stderr = float(payoffs.std(ddof=1) / np.sqrt(len(payoffs)))
    _write_json(out / "asian.json", {
        "strike": strike, "value": value, "stderr": stderr,
        "half_width": 2.0 * stderr, "n_paths": len(payoffs),
    })
    return ["asian.json"], (
        f"asian: strike {strike:g} -> {value:.6g} +/- {2 * stderr:.2g} "
        f"({len(payoffs)} paths)")


def _cmd_tau_cdf(cfg, out: Path, seed, threads: int):
    horizon = cfg.params.horizon
    thresholds = cfg.experiment.get(
        "thresholds", [horizon / 4.0, horizon / 8.0])
    records = _records(cfg, seed)
    ests = tau_cdf(records, thresholds, horizon)
    _write_csv(out / "tau_cdf.csv",
               ["threshold", "estimate", "stderr", "plus_minus"],
               ((u, e.value, e.stderr, e.half_width)
                for u, e in zip(thresholds, ests)))
    parts = ", ".join(f"P(tau<={u:g}) = {e.value:.4f} +/- {e.half_width:.4f}"
                      for u, e in zip(thresholds, ests))
    return ["tau_cdf.csv"], f"tau-cdf ({len(records)} paths): {parts}"


def _estimator_specs(cfg) -> dict[str, EstimatorSpec]:
    names = cfg.experiment.get("estimators", ["asian", "tau"])
    strike = cfg.experiment.get("strike", 1.0)
    level = cfg.experiment.get("level", 3)
    return {name: EstimatorSpec(kind=name, level=level, strike=strike)
            for name in names}


def _cmd_convergence(cfg, out: Path, seed, threads: int):
    if cfg.experiment.get("process", "sli") != "sli":
        raise ConfigError("config validation failed", [
            "experiment.process: convergence studies run on the particle "
            "system (sli)"])
    spec = _sys_spec(cfg)
    n_values = cfg.experiment.get("n_values", list(range(100, 3201, 100)))
    reps = cfg.experiment.get("reps_per_n", 200)
    ref_n = cfg.experiment.get("reference_n", 10_000)
    ref_reps = cfg.experiment.get("reference_reps", 24)
    specs = _estimator_specs(cfg)
    refs = {name: build_reference(spec, est, ref_n, ref_reps, seed)
            for name, est in specs.items()}
    results = run_study_multi(spec, n_values, reps, specs, refs, seed,
                              threads=threads)
    artifacts: list[str] = []
    alphas = []
    for name, res in results.items():
        _write_csv(out / f"study_{name}.csv", ["n", "mse", "n_reps"],
                   res.rows)
        _write_json(out / f"regression_{name}.json", {
            "alpha": res.regression.alpha, "beta": res.regression.beta,
            "resid_var": res.regression.resid_var,
            "excluded_n": res.excluded,
            "reference": {"value": res.reference.value,
                          "stderr": res.reference.stderr},
        })
        artifacts += [f"study_{name}.csv", f"regression_{name}.json"]
        alphas.append(f"alpha[{name}] = {res.regression.alpha:.4f}")
    if "clt_systems" in cfg.experiment:
        name, est = next(iter(specs.items()))
        report = clt_histogram(spec, est, cfg.engine.n,
                               cfg.experiment["clt_systems"], seed,
                               threads=threads)
        _write_csv(out / "clt_sample.csv", ["z"],
                   ((z,) for z in report.sample))
        _write_json(out / "clt.json", {
            "estimator": name, "skewness": report.skewness,
            "excess_kurtosis": report.excess_kurtosis,
            "n_systems": int(report.sample.size),
            "n_particles": cfg.engine.n, "degenerate": report.degenerate,
        })
        artifacts += ["clt_sample.csv", "clt.json"]
    return artifacts, "convergence: " + ", ".join(alphas)


def _cmd_fokker_planck(cfg, out: Path, seed, threads: int):
    fp = cfg.experiment.get("fp")
    if fp is None:
        raise ConfigError("config validation failed", [
            "experiment.fp: required for the fokker-planck command"])
    gen = GeneratorFamily(np.asarray(fp["rates"], dtype=float))
    fvals = FactorValues(np.asarray(fp["f_values"], dtype=float))
    params, li = cfg.params, cfg.li
    fvals.check_bounds(params.f_low, params.f_high)
    p0 = dirac_initial(params.m, gen.j, cfg.engine.x0, fp["y0"])
    traj = solve_fp(p0, li, gen, fvals, params.horizon, fp["dt"],
                    f_low=params.f_low)
    final = traj.final.p
    _write_csv(out / "fp_terminal.csv", ["x", "y", "prob"],
               ((i, j, final[i, j]) for i in range(final.shape[0])
                for j in range(final.shape[1])))
    fp_marg = traj.marginal_x()
    _write_csv(out / "fp_marginal.csv", ["x", "prob"], enumerate(fp_marg))
    artifacts = ["fp_terminal.csv", "fp_marginal.csv"]
    mass_err = abs(float(final.sum()) - 1.0)
    summary = (f"fokker-planck: mass error {mass_err:.2e}, "
               f"min entry {float(final.min()):.2e}")
    n_paths = fp.get("ctmc_paths", 0)
    if n_paths:
        xs, _ = simulate_joint_ctmc_terminals(
            li, gen, fvals, cfg.engine.x0, fp["y0"], params.horizon, n_paths,
            seed, traj, f_low=params.f_low, f_high=params.f_high)
        emp = np.bincount(xs, minlength=params.m + 1) / n_paths
        se = np.sqrt(np.maximum(fp_marg * (1 - fp_marg), 1e-300) / n_paths)
        max_z = float(np.max(np.abs(emp - fp_marg) / se))
        _write_csv(out / "ctmc_marginal.csv", ["x", "prob"], enumerate(emp))
        artifacts.append("ctmc_marginal.csv")
        summary += f", CTMC cross-check max |z| = {max_z:.2f} ({n_paths} paths)"
    return artifacts, summary


def _time_run(cfg, algorithm: str, n: int, seed) -> float:
    t0 = time.perf_counter()
    run_system(cfg.params, cfg.li, cfg.dynamics, n, cfg.engine.d,
               algorithm=algorithm, seed=seed, x0=cfg.engine.x0,
               initial_law=cfg.engine.initial_law)
    return time.perf_counter() - t0


def _cmd_bench(cfg, out: Path, seed, threads: int):
    if cfg.dynamics is None:
        raise ConfigError("config validation failed", [
            "factor.kind: bench times the particle system; configure a factor"])
    n = cfg.experiment.get("bench_n", 20_000)
    improved_s = _time_run(cfg, "improved", n, seed)
    naive_s = _time_run(cfg, "naive", n, seed)
    payload: dict[str, Any] = {
        "n": n, "naive_s": naive_s, "improved_s": improved_s,
        "ratio": naive_s / improved_s,
    }
    grid = cfg.experiment.get("bench_grid")
    if grid:
        times = {alg: [_time_run(cfg, alg, k, seed) for k in grid]
                 for alg in ("naive", "improved")}
        logn = np.log(np.asarray(grid, dtype=float))
        payload["exponents"] = {
            alg: float(np.polyfit(logn, np.log(ts), 1)[0])
            for alg, ts in times.items()}
        payload["grid"] = {"n": list(grid), **times}
    _write_json(out / "bench.json", payload)
    summary = (f"bench: N={n}, naive {naive_s:.2f}s / improved "
               f"{improved_s:.2f}s, ratio {payload['ratio']:.1f}")
    if grid:
        exps = payload["exponents"]
        summary += (f"; exponents naive {exps['naive']:.2f}, "
                    f"improved {exps['improved']:.2f}")
    return ["bench.json"], summary


_COMMANDS: dict[str, Callable] = {
    "simulate": _cmd_simulate,
    "marginals": _cmd_marginals,
    "asian": _cmd_asian,
    "tau-cdf": _cmd_tau_cdf,
    "convergence": _cmd_convergence,
    "fokker-planck": _cmd_fokker_planck,
    "bench": _cmd_bench,
}


def dispatch(command: str, cfg: ExperimentConfig, out_dir, *,
             seed=None, threads: int = 1) -> ResultBundle:
    """Run one named experiment and write its artifacts under out_dir.

    Args:
        command: One of the CLI command names.
        cfg: Parsed configuration.
        out_dir: Output directory, created if absent.
        seed: Optional master-seed override for engine.seed.
        threads: Worker processes for replication fan-out (convergence).

    Returns:
        ResultBundle with the manifest metadata, artifact paths, and the
        one-line summary (also printed by main()).
    """
    if command not in _COMMANDS:
        raise ConfigError(f"unknown command {command!r}",
                          [f"command: must be one of {sorted(_COMMANDS)}"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    effective_seed = cfg.engine.seed if seed is None else seed
    t0 = time.perf_counter()
    names, summary = _COMMANDS[command](cfg, out, effective_seed, threads)
    metadata = {
        "command": command,
        "config_hash": config_hash(cfg),
        "version": f"slisim-{__version__}",
        "seed": effective_seed,
        "wall_clock_s": time.perf_counter() - t0,
        "artifacts": sorted(names),
    }
    _write_json(out / "manifest.json", metadata)
    return ResultBundle(metadata=metadata,
                        artifacts={k: out / k for k in names},
                        summary=summary)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="slisim",
        description="Stochastic local intensity credit-loss simulator")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="YAML config path")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override engine.seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes for replication fan-out")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        bundle = dispatch(args.command, cfg, args.out, seed=args.seed,
                          threads=args.threads)
    except SlisimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for failure in getattr(exc, "failures", []):
            print(f"  - {failure}", file=sys.stderr)
        return 2
    print(bundle.summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
