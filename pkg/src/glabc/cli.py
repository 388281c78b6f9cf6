"""Command-line front end.

Subcommands: ``run`` (chains + manifest), ``tune`` (sequential cESJD
search), ``reference`` (importance-sampling or long-run ground truth),
``diagnose`` (trace diagnostics), ``grad-bench`` (gradient-estimator
comparison table), ``bench`` (KL-versus-budget curves).  Everything is
driven by one JSON config; results are CSV/JSON only.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .diag import (
    KdeSpec,
    ReferencePosterior,
    ess,
    grid_kl,
    grid_kl_marginals,
    kde_1d,
    kde_2d,
    reference_by_is,
    reference_marginals_from_samples,
)
from .grad import GradEstimator, estimate_grad
from .runner import (
    ConfigError,
    KernelPlan,
    Trace,
    build_target,
    run,
    run_chain,
)
from .rng import make_stream
from .tune import EsjdEstimate, TuneDim, TuneSpace, cesjd, esjd_d, sequential_tune

__all__ = ["main"]


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _cmd_run(cfg: dict, out_dir: str, threads: int) -> int:
    manifest = run(cfg, out_dir, threads=threads)
    print(f"wrote {len(manifest['chains'])} chain(s) to {out_dir}; "
          f"{manifest['total_simulator_calls']} simulator calls "
          f"in {manifest['wall_clock_s']:.1f}s")
    return 0


# ---------------------------------------------------------------------------
# tune
# ---------------------------------------------------------------------------

def _make_short_run_evaluator(cfg: dict, target):
    tune_cfg = cfg.get("tune")
    if not tune_cfg:
        raise ConfigError("tune command needs a 'tune' section")
    short = tune_cfg.get("short_run", {})
    iters = int(short.get("iterations", 5000))
    reps = int(short.get("replications", 5))
    burn = float(short.get("burn_frac", 0.1))
    base_kernel = dict(cfg.get("kernel", {"type": "gl", "proposal": "prior"}))
    theta0 = short.get("theta0")
    theta0 = None if theta0 is None else np.asarray(theta0, dtype=float)

    def evaluator(params: dict, stream) -> EsjdEstimate:
        kcfg = dict(base_kernel)
        kcfg.update({k: v for k, v in params.items()
                     if k in ("gamma", "n_batch", "scale", "eta")})
        if "gamma" in kcfg:
            kcfg.setdefault("type", "gl")
        plan = KernelPlan.from_config(kcfg, target)
        esjds, costs = [], []
        for r in range(reps):
            res = run_chain(target, plan, iters, stream.child(r), theta0=theta0)
            tail = res.trace.thetas[int(burn * iters):]
            esjds.append(esjd_d(tail))
            costs.append(res.trace.total_sims / iters)
        return EsjdEstimate(esjd=float(np.mean(esjds)),
                            cost_per_iter=float(np.mean(costs)),
                            n_iters=iters, dim=target.dim)

    return evaluator, tune_cfg


def _tune_space_from_config(tune_cfg: dict) -> TuneSpace:
    dims = []
    for d in tune_cfg.get("dims", []):
        dims.append(TuneDim(name=d["name"], lower=float(d["lower"]),
                            upper=float(d["upper"]), scale=d.get("scale", "linear"),
                            integer=bool(d.get("integer", False))))
    if not dims:
        raise ConfigError("tune section needs at least one dimension")
    try:
        return TuneSpace(dims=dims, budget=int(tune_cfg.get("budget", 6)),
                         rounds=int(tune_cfg.get("rounds", 3)),
                         shrink=float(tune_cfg.get("shrink", 0.5)),
                         cost_constraint=tune_cfg.get("cost_constraint"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_tune(cfg: dict, out_dir: str, seed: int) -> int:
    target = build_target(cfg.get("model", {}))
    evaluator, tune_cfg = _make_short_run_evaluator(cfg, target)
    space = _tune_space_from_config(tune_cfg)
    best, report = sequential_tune(space, evaluator, make_stream(seed, 0xE7))
    rows = report.as_csv_rows()
    _write_csv(os.path.join(out_dir, "tune_report.csv"), rows[0], rows[1:])
    with open(os.path.join(out_dir, "tune_best.json"), "w") as fh:
        json.dump({"best": best, "cesjd": report.best["cesjd"]}, fh, indent=2)
    print("incumbent:", json.dumps(best), f"cesjd={report.best['cesjd']:.6g}")
    return 0


# ---------------------------------------------------------------------------
# reference
# ---------------------------------------------------------------------------

def _cmd_reference(cfg: dict, out_dir: str, seed: int) -> int:
    target = build_target(cfg.get("model", {}))
    ref_cfg = cfg.get("reference")
    if not ref_cfg:
        raise ConfigError("reference command needs a 'reference' section")
    method = ref_cfg.get("method", "is")
    path = os.path.join(out_dir, ref_cfg.get("filename", "reference.ref"))
    if method == "is":
        spec = KdeSpec(box=np.asarray(ref_cfg["box"], dtype=float),
                       grid_shape=tuple(ref_cfg["grid_shape"]),
                       bandwidth=ref_cfg.get("bandwidth"))
        ref = reference_by_is(target, int(ref_cfg.get("n_prior", 10**6)),
                              int(ref_cfg.get("n_keep", 10**5)), spec,
                              make_stream(seed, 0xEF))
    elif method == "long_run":
        plan = KernelPlan.from_config(ref_cfg.get("kernel", {"type": "gl"}), target)
        iters = int(ref_cfg.get("iterations", 100_000))
        chains = int(ref_cfg.get("chains", 4))
        burn = float(ref_cfg.get("burn_frac", 0.2))
        theta0 = ref_cfg.get("theta0")
        theta0 = None if theta0 is None else np.asarray(theta0, dtype=float)
        pooled = []
        for c in range(chains):
            res = run_chain(target, plan, iters, make_stream(seed, 0xEF).child(c),
                            theta0=theta0)
            pooled.append(res.trace.thetas[int(burn * iters):])
        samples = np.concatenate(pooled, axis=0)
        ref = reference_marginals_from_samples(
            samples, np.asarray(ref_cfg["box"], dtype=float),
            n_grid=int(ref_cfg.get("n_grid", 512)),
            provenance=f"long run: {chains} chains x {iters} iters, seed {seed}")
    else:
        raise ConfigError(f"unknown reference method {method!r}")
    ref.save(path)
    print(f"reference written to {path} ({ref.provenance})")
    return 0


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def _cmd_diagnose(cfg: dict, out_dir: str, trace_paths) -> int:
    if not trace_paths:
        raise ConfigError("diagnose needs at least one --trace file")
    rows = []
    for path in trace_paths:
        trace = Trace.load_csv(path)
        burn = int(cfg.get("burn_in", 0)) if cfg else 0
        tail = trace.thetas[burn:]
        acc = trace.acceptance_by_move()
        row = {
            "trace": path,
            "iterations": trace.n_iters,
            "total_sims": trace.total_sims,
            "esjd_d": esjd_d(tail),
            "acceptance_local": acc.get("local"),
            "acceptance_global": acc.get("global"),
        }
        for j in range(tail.shape[1]):
            row[f"ess_theta_{j}"] = ess(tail[:, j])
        rows.append(row)
        print(json.dumps(row))
    header = list(rows[0].keys())
    _write_csv(os.path.join(out_dir, "diagnostics.csv"), header,
               [[r[k] for k in header] for r in rows])
    return 0


# ---------------------------------------------------------------------------
# grad-bench
# ---------------------------------------------------------------------------

def _cmd_grad_bench(cfg: dict, out_dir: str, seed: int) -> int:
    gb = cfg.get("grad_bench")
    if not gb:
        raise ConfigError("grad-bench needs a 'grad_bench' section")
    target = build_target(cfg.get("model", {"name": "gauss1d"}))
    grid_cfg = gb.get("grid", {"lo": -1.0, "hi": 1.0, "n": 21})
    grid = np.linspace(float(grid_cfg["lo"]), float(grid_cfg["hi"]),
                       int(grid_cfg["n"]))
    methods = gb.get("methods", ["mc_random", "crn_max", "crn_mean", "gaussian_crn"])
    reps = int(gb.get("replications", 1000))
    n_seeds = int(gb.get("n_seeds", 100))
    d_theta = float(gb.get("d_theta", 0.05))
    root = make_stream(seed, 0x6BE)
    rows = []
    for method in methods:
        est = GradEstimator(method=method, n_seeds=n_seeds, d_theta=d_theta)
        for k, theta in enumerate(grid):
            g = np.array([
                estimate_grad(target, np.array([theta]), est,
                              root.child(hash(method) & 0xFFFF, k, r)).grad[0]
                for r in range(reps)])
            g = g[np.isfinite(g)]
            closed = (target.analytic_grad_loglik(np.array([theta]))[0]
                      if target.analytic_grad_loglik else float("nan"))
            rows.append([method, theta, g.mean(), g.std(),
                         g.mean() - 2 * g.std(), g.mean() + 2 * g.std(), closed])
    path = os.path.join(out_dir, "grad_bench.csv")
    _write_csv(path, ["method", "theta", "mean", "sd", "lo2sigma", "hi2sigma",
                      "closed_form"], rows)
    print(f"gradient benchmark written to {path}")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _kl_of_samples(target, samples, reference, bandwidth=None):
    if reference.kind == "joint":
        spec = KdeSpec(box=reference.box, grid_shape=reference.grid_shape,
                       bandwidth=bandwidth)
        dens = kde_2d(samples, spec) if len(reference.grid_shape) == 2 \
            else kde_1d(samples[:, 0], spec)
        return float(grid_kl(reference, dens))
    estimates = []
    for d in range(samples.shape[1]):
        spec = KdeSpec(box=reference.box[d:d + 1],
                       grid_shape=(reference.grid_shape[d],),
                       bandwidth=None if bandwidth is None else [bandwidth[d]])
        estimates.append(kde_1d(samples[:, d], spec))
    return float(grid_kl_marginals(reference, estimates).mean())


def _cmd_bench(cfg: dict, out_dir: str, seed: int) -> int:
    bench = cfg.get("bench")
    if not bench:
        raise ConfigError("bench needs a 'bench' section")
    ref_path = bench.get("reference")
    if not ref_path or not os.path.exists(ref_path):
        raise ConfigError("bench needs an existing reference file; "
                          "run `glabc reference` first")
    reference = ReferencePosterior.load(ref_path)
    target = build_target(cfg.get("model", {}))
    checkpoints = [int(b) for b in bench.get("checkpoints", [10**5])]
    replicates = int(bench.get("replicates", 1))
    burn_frac = float(bench.get("burn_frac", 0.1))
    bandwidth = bench.get("bandwidth")
    rows = []
    for m_idx, method in enumerate(bench.get("kernels", [])):
        name = method.get("name", f"kernel{m_idx}")
        plan = KernelPlan.from_config(method["kernel"], target)
        cost = plan.cost_per_iter()
        max_iters = int(max(checkpoints) / cost)
        for rep in range(replicates):
            res = run_chain(target, plan, max_iters,
                            make_stream(seed, 0xBE).child(m_idx, rep),
                            theta0=None if bench.get("theta0") is None
                            else np.asarray(bench["theta0"], dtype=float))
            cum = np.cumsum(res.trace.sims_used)
            for budget in checkpoints:
                upto = int(np.searchsorted(cum, budget, side="right"))
                if upto < 10:
                    continue
                samples = res.trace.thetas[int(burn_frac * upto):upto]
                kl = _kl_of_samples(target, samples, reference, bandwidth)
                rows.append([name, budget, rep, kl])
    path = os.path.join(out_dir, "bench_kl.csv")
    _write_csv(path, ["method", "budget", "replicate", "kl"], rows)
    print(f"benchmark written to {path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glabc",
        description="Global-Local ABC-MCMC: batch runs, tuning, diagnostics")
    parser.add_argument("command",
                        choices=["run", "tune", "reference", "diagnose",
                                 "grad-bench", "bench"])
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config root seed (u64)")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel chain workers for `run`")
    parser.add_argument("--trace", action="append", default=[],
                        help="trace CSV for `diagnose` (repeatable)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config) if args.config else {}
        if args.seed is not None:
            cfg["seed"] = args.seed
        seed = int(cfg.get("seed", 0))
        os.makedirs(args.out, exist_ok=True)
        if args.command == "run":
            if not args.config:
                raise ConfigError("run needs --config")
            return _cmd_run(cfg, args.out, args.threads)
        if args.command == "tune":
            return _cmd_tune(cfg, args.out, seed)
        if args.command == "reference":
            return _cmd_reference(cfg, args.out, seed)
        if args.command == "diagnose":
            return _cmd_diagnose(cfg, args.out, args.trace)
        if args.command == "grad-bench":
            return _cmd_grad_bench(cfg, args.out, seed)
        return _cmd_bench(cfg, args.out, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
