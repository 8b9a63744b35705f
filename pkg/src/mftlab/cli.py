"""Command-line experiment runner.

    mft run <config.json> [--seed S] [--threads W] [--out DIR]
    mft describe <config.json>

Exit status: 0 success, 1 configuration parse error, 2 model validation
failure, 3 solver failure (divergence or iteration cap).
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .cc_solver import solve_cc
from .equivalence import average_discrepancy, m3_stacked_check, simulate_m_systems, simulate_p_systems
from .io import ConfigError, ExperimentConfig, canonical_json, load_config, run_id, write_csv, write_curves, write_json
from .model import ModelError, ModelSpec, validate
from .population import (
    MAX_ORACLE_DIM,
    centralized_oracle,
    frozen_cost_mean,
    gap_rate_verdicts,
    simulate_population,
    variational_diagnostics,
)
from .stochastics import TimeGrid, loglog_slope, make_ensemble, resolve_threads
from .wellposedness import report_with_modulus

EXIT_OK, EXIT_PARSE, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2, 3
SWEEP_HEADER = ["N", "consistency_error", "social_cost", "gap", "se", "social_cost_se", "frozen_gap"]


class SolverFailure(RuntimeError):
    pass


def _slope(Ns, vals):
    vals = np.asarray(vals, dtype=float)
    if len(Ns) < 2 or np.any(vals <= 0):
        return float("nan")
    return loglog_slope(Ns, vals)


def _choice(cfg, key: str, allowed: tuple, default: str) -> str:
    value = cfg.options.get(key, default)
    if value not in allowed:
        raise ConfigError(f"option {key!r} must be one of {', '.join(allowed)}; got {value!r}")
    return value


def _path_option(value, K: int, m: int, default: float) -> np.ndarray:
    if value is None:
        value = default
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full((K, m), float(a))
    if a.ndim == 1 and a.shape[0] == m and K != m:
        return np.tile(a, (K, 1))
    if a.ndim == 1 and m == 1:
        a = a[:, None]
    if a.shape != (K, m):
        raise ConfigError(f"control path option must be a scalar, a length-m vector or a ({K}, {m}) table")
    return a


def _oracle_ok(spec: ModelSpec, N: int) -> bool:
    return (
        spec.constraint.kind == "full"
        and spec.info.kind == "full"
        and spec.diversity.kind != "continuum"
        and N * spec.n <= MAX_ORACLE_DIM
    )


def _solve(cfg, spec, grid, seed, threads):
    ens = make_ensemble(grid, cfg.paths, spec.diversity, seed, threads)
    sol = solve_cc(
        spec,
        grid,
        ens,
        tol=cfg.tol,
        max_iter=cfg.max_iter,
        damping=cfg.damping,
        y2_coupling=_choice(cfg, "y2_coupling", ("nodewise", "averaged"), "nodewise"),
    )
    info = {
        "status": sol.status,
        "iterations": sol.iterations,
        "residual_history": sol.residual_history,
        "final_residual": sol.residual_history[-1] if sol.residual_history else None,
        "rho": sol.rho,
        "damping": sol.damping,
        "y2_coupling": sol.y2_coupling,
        "kernel_backend": kernels.BACKEND,
    }
    return sol, info


# --------------------------------------------------------------------------
# experiments: each fills ``out`` and returns (curves dict or None, sweep rows or None)
# --------------------------------------------------------------------------


def exp_solve_cc(cfg, spec, grid, seed, threads, out):
    sol, info = _solve(cfg, spec, grid, seed, threads)
    out["solver"] = info
    if not sol.converged:
        raise SolverFailure(f"consistency solver stopped with status {sol.status!r}")
    out["mean_alpha_T"] = sol.mean_alpha[-1]
    return sol.curves(), None


def exp_wellposedness(cfg, spec, grid, seed, threads, out):
    rep = report_with_modulus(spec)
    out["wellposedness"] = rep.to_dict()
    return None, None


def exp_population(cfg, spec, grid, seed, threads, out):
    sol, info = _solve(cfg, spec, grid, seed, threads)
    out["solver"] = info
    if not sol.converged:
        raise SolverFailure(f"consistency solver stopped with status {sol.status!r}")
    types = _choice(cfg, "types", ("iid", "proportional"), "iid")
    rows, ce, fg = [], [], []
    for N in cfg.sweep:
        run = simulate_population(spec, sol, N, cfg.replications, seed, types=types, threads=threads, keep_paths=False)
        gap = se = float("nan")
        if _oracle_ok(spec, N) and (types == "proportional" or spec.diversity.n_nodes == 1):
            gap = run.social_cost - centralized_oracle(spec, N, grid)
            se = run.social_cost_se
        rows.append([N, run.consistency_error, run.social_cost, gap, se, run.social_cost_se, run.frozen_gap])
        ce.append(run.consistency_error)
        fg.append(run.frozen_gap)
    scaled = np.asarray(cfg.sweep) * np.asarray(ce)
    out["consistency_slope"] = _slope(cfg.sweep, ce)
    out["frozen_gap_slope"] = _slope(cfg.sweep, fg)
    out["scaled_error_ratio"] = float(scaled.max() / scaled.min()) if scaled.min() > 0 else float("nan")
    return sol.curves(), rows


def exp_gap(cfg, spec, grid, seed, threads, out):
    for N in cfg.sweep:
        if not _oracle_ok(spec, N):
            raise ModelError(f"the centralized benchmark does not apply at N={N} for this model")
    sol, info = _solve(cfg, spec, grid, seed, threads)
    out["solver"] = info
    if not sol.converged:
        raise SolverFailure(f"consistency solver stopped with status {sol.status!r}")
    try:
        agents = int(cfg.options.get("frozen_agents", 1 << 20))
    except (TypeError, ValueError):
        raise ConfigError("option 'frozen_agents' must be an integer") from None
    if agents < 1:
        raise ConfigError("option 'frozen_agents' must be positive")
    fm, fse = frozen_cost_mean(spec, sol, agents, seed, threads=threads)
    out["frozen_cost"] = {"mean": fm, "se": fse, "agents": agents}
    rows, gaps, ses = [], [], []
    for N in cfg.sweep:
        run = simulate_population(
            spec, sol, N, cfg.replications, seed, types="proportional", threads=threads, keep_paths=False
        )
        best = centralized_oracle(spec, N, grid)
        d = run.cost_per_replication - run.frozen_cost_per_replication
        gap = float(d.mean() + fm - best)
        se = float(np.sqrt(d.var(ddof=1) / d.size + fse**2))
        rows.append([N, run.consistency_error, run.social_cost, gap, se, run.social_cost_se, run.frozen_gap])
        gaps.append(gap)
        ses.append(se)
    out["verdicts"] = gap_rate_verdicts(cfg.sweep, gaps, ses)
    return sol.curves(), rows


def exp_equivalence(cfg, spec, grid, seed, threads, out):
    u = _path_option(cfg.options.get("control"), grid.steps, spec.m, 0.0)
    cmp_ = simulate_p_systems(spec, u, grid, cfg.paths, seed, threads=threads)
    out["mean_gap_ratio"] = {f"{a}-{b}": cmp_.mean_gap_ratio(a, b) for a, b in (("P1", "P2"), ("P1", "P3"), ("P2", "P3"))}
    out["identity_max_z"] = {k: cmp_.max_z(k) for k in cmp_.identities}
    curves = {"t": grid.times}
    for s in ("P1", "P2", "P3"):
        curves[f"mean_{s}"] = cmp_.mean_curves[s]
        curves[f"mean_se_{s}"] = cmp_.mean_ses[s]
    for s in ("P1", "P2", "P3"):
        curves[f"second_{s}"] = cmp_.second_moments[s]
        curves[f"second_se_{s}"] = cmp_.ses[s]
    for k, (lhs, rhs, se) in cmp_.identities.items():
        curves[f"{k}_rhs"] = rhs
    curves["p2_printed_cross"] = cmp_.components["p2_printed_cross"]
    rows = None
    if spec.diversity.kind != "continuum":
        ok, _, _ = m3_stacked_check(spec, u, max(2, min(cfg.sweep or [4])), grid, seed)
        out["m3_stacked_bitwise"] = ok
    if cfg.sweep:
        pairs = (("M1", "M2"), ("M1", "M3"), ("M2", "M3"), ("M1", "M"))
        if spec.diversity.kind == "continuum":
            pairs = (("M1", "M2"), ("M1", "M"))
        systems = tuple(sorted({s for p in pairs for s in p}))
        rows, cols = [], {f"{a}-{b}": [] for a, b in pairs}
        for N in cfg.sweep:
            mc = simulate_m_systems(spec, u, N, grid, seed, cfg.replications, systems=systems, threads=threads)
            vals = [average_discrepancy(mc, a, b) for a, b in pairs]
            rows.append([N, *vals])
            for (a, b), v in zip(pairs, vals):
                cols[f"{a}-{b}"].append(v)
        out["discrepancy_slopes"] = {k: _slope(cfg.sweep, v) for k, v in cols.items()}
        out["sweep_header"] = ["N", *cols.keys()]
    return curves, rows


def exp_diagnostics(cfg, spec, grid, seed, threads, out):
    du = _path_option(cfg.options.get("perturbation"), grid.steps, spec.m, 1.0)
    coupling = _choice(cfg, "y2_coupling", ("nodewise", "averaged"), "nodewise")
    rows, cols = [], {k: [] for k in ("star", "star_sup_j", "star_star_inside", "star_star_outside")}
    for N in cfg.sweep:
        d = variational_diagnostics(spec, None, N, du, seed, cfg.replications, grid=grid, threads=threads, coupling=coupling)
        rows.append([N, *(d.gaps[k] for k in cols)])
        for k in cols:
            cols[k].append(d.gaps[k])
    out["slopes"] = {k: _slope(cfg.sweep, v) for k, v in cols.items()}
    out["sweep_header"] = ["N", *cols.keys()]
    return None, rows


EXPERIMENTS = {
    "solve-cc": exp_solve_cc,
    "check-wellposedness": exp_wellposedness,
    "population-sweep": exp_population,
    "gap-vs-n": exp_gap,
    "equivalence": exp_equivalence,
    "diagnostics": exp_diagnostics,
}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _error(kind: str, message: str, **extra) -> dict:
    return {"status": "error", "error": {"kind": kind, "message": message, **extra}}


def run(cfg: ExperimentConfig, *, seed: int | None = None, threads: int | None = None, out_dir=None) -> int:
    if seed is not None:
        cfg.seed = int(seed)
    out_path = Path(out_dir or cfg.output_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    threads = resolve_threads(threads)
    summary = {
        "run_id": run_id(cfg),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "experiment": cfg.experiment,
    }
    try:
        spec = cfg.model_spec()
    except ModelError as exc:
        summary.update(_error("model", str(exc), violations=[str(exc)]))
        write_json(out_path / "summary.json", summary)
        return EXIT_INVALID
    bad = validate(spec)
    if bad:
        summary.update(
            _error(
                "validation",
                "; ".join(str(v) for v in bad),
                violations=[{"code": v.code, "message": v.message, "time": v.time, "node": v.node} for v in bad],
            )
        )
        write_json(out_path / "summary.json", summary)
        return EXIT_INVALID
    grid = TimeGrid(cfg.T, cfg.steps)
    body: dict = {}
    t0 = time.perf_counter()
    try:
        curves, rows = EXPERIMENTS[cfg.experiment](cfg, spec, grid, cfg.seed, threads, body)
    except SolverFailure as exc:
        summary.update(body)
        summary.update(_error("solver", str(exc)))
        write_json(out_path / "summary.json", summary)
        return EXIT_SOLVER
    except ConfigError as exc:
        summary.update(body)
        summary.update(_error("parse", str(exc)))
        write_json(out_path / "summary.json", summary)
        return EXIT_PARSE
    except ModelError as exc:
        summary.update(body)
        summary.update(_error("validation", str(exc), violations=[str(exc)]))
        write_json(out_path / "summary.json", summary)
        return EXIT_INVALID
    summary.update(body)
    summary["status"] = "ok"
    summary["elapsed_seconds"] = time.perf_counter() - t0
    if curves is not None:
        write_curves(out_path / "curves.csv", curves)
    if rows is not None:
        header = body.pop("sweep_header", None) or SWEEP_HEADER
        summary.pop("sweep_header", None)
        write_csv(out_path / "sweep.csv", header, rows)
    write_json(out_path / "summary.json", summary)
    return EXIT_OK


def describe(cfg: ExperimentConfig) -> str:
    """Dry-run plan: grid, ensemble sizes, a constants preview and a memory estimate."""
    lines = [f"experiment: {cfg.experiment}", f"run id: {run_id(cfg)}"]
    grid = TimeGrid(cfg.T, cfg.steps)
    lines.append(f"grid: T={cfg.T:g}, steps={cfg.steps}, dt={grid.dt:g}")
    lines.append(f"monte carlo: paths={cfg.paths}, replications={cfg.replications}, seed={cfg.seed}")
    lines.append(f"solver: tol={cfg.tol:g}, max_iter={cfg.max_iter}, damping={cfg.damping:g}")
    try:
        spec = cfg.model_spec()
    except ModelError as exc:
        lines.append(f"model: cannot be built ({exc})")
        return "\n".join(lines)
    n, m, K = spec.n, spec.m, grid.steps
    lines.append(f"model: n={n}, m={m}, diversity={spec.diversity.kind} ({spec.diversity.n_nodes} nodes), "
                 f"constraint={spec.constraint.kind}, info={spec.info.kind}")
    bad = validate(spec)
    if bad:
        lines.append("violations: " + "; ".join(str(v) for v in bad))
    else:
        rep = report_with_modulus(spec) if cfg.experiment == "check-wellposedness" else None
        from .wellposedness import compute_constants

        c = rep or compute_constants(spec)
        lines.append(
            f"constants: rho1={c.rho1:.6g}, rho2={c.rho2_star:.6g}, monotonicity margin={c.a4_margin:.6g} "
            f"({'holds' if c.a4_satisfied else 'fails'})"
        )
    # the solver keeps about a dozen (K+1) x M x n arrays alive
    solver_bytes = 12 * (K + 1) * cfg.paths * max(n, m) * 8
    lines.append(f"estimated solver memory: {solver_bytes / 2**20:.1f} MiB")
    for N in cfg.sweep:
        agents = N * cfg.replications
        lines.append(f"  N={N}: {cfg.replications} replications x {N} agents = {agents} agent paths")
    return "\n".join(lines)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mft", description="Mean-field team experiments")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="override monte_carlo.seed")
    r.add_argument("--threads", type=int, default=None, help="worker threads (default: MFT_THREADS or 1)")
    r.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    d = sub.add_parser("describe", help="print the plan without simulating")
    d.add_argument("config")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.command == "run" and args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_json(Path(args.out) / "summary.json", _error("parse", str(exc)))
        return EXIT_PARSE
    if args.command == "describe":
        print(describe(cfg))
        return EXIT_OK
    code = run(cfg, seed=args.seed, threads=args.threads, out_dir=args.out)
    if code != EXIT_OK:
        print(f"error: run failed with exit status {code}; see summary.json", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
