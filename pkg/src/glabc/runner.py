"""Batch orchestration: configs, the chain loop, traces, and manifests.

A :class:`KernelPlan` resolves a JSON kernel spec against a target (which
proposal object, which gradient estimator, optional flow adaptation); the
chain loop then drives the kernel-module internals with one live generator
per chain, which keeps per-iteration overhead low while staying bit-
reproducible for a fixed root seed.
"""

from __future__ import annotations

import csv
import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .flow import FlowModel, FlowProposal, TrainBuffer, build_flow, flow_train_step
from .grad import GradEstimator
from .kernels import (
    GaussianIndependentProposal,
    IndependentProposal,
    MixtureOfProposals,
    PriorProposal,
    _imh_move,
    _isir_move,
    _mala_move,
    _rw_move,
    init_state,
)
from .model import AbcTarget
from .rng import SeedStream, make_stream
from . import zoo

__all__ = ["ConfigError", "RunConfig", "KernelPlan", "Trace", "run_chain", "run",
           "build_proposal", "build_grad_estimator"]

MOVE_CODES = {"init": 0, "local": 1, "global": 2}
MOVE_NAMES = {v: k for k, v in MOVE_CODES.items()}


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def build_target(model_cfg: dict) -> AbcTarget:
    cfg = dict(model_cfg)
    name = cfg.pop("name", None)
    if name is None:
        raise ConfigError("model config needs a 'name'")
    try:
        return zoo.make_target(name, **cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def build_grad_estimator(cfg: Optional[dict]) -> GradEstimator:
    cfg = dict(cfg or {})
    try:
        return GradEstimator(
            method=cfg.get("method", "crn_mean"),
            n_seeds=int(cfg.get("n_seeds", 100)),
            d_theta=np.asarray(cfg.get("d_theta", 0.05), dtype=float),
        )
    except ValueError as exc:
        raise ConfigError(f"bad gradient estimator: {exc}") from exc


def build_proposal(spec, target: AbcTarget) -> IndependentProposal:
    """Resolve a proposal spec: 'prior', zoo shortcuts, or an explicit Gaussian."""
    if spec is None or spec == "prior":
        return PriorProposal(target.prior)
    if isinstance(spec, str):
        if spec == "optimal" and target.name == "mixture":
            return zoo.mixture_optimal_proposal()
        if spec == "uniform" and target.name == "mixture":
            return zoo.mixture_uniform_proposal()
        if spec == "flat_prior" and target.name == "vdp":
            return zoo.vdp_flat_proposal()
        if spec == "sharp" and target.name == "vdp":
            return zoo.vdp_sharp_proposal()
        raise ConfigError(f"unknown proposal shortcut {spec!r} for model {target.name!r}")
    if isinstance(spec, dict) and spec.get("type") == "gaussian":
        return GaussianIndependentProposal(spec["mean"], spec["sd"])
    raise ConfigError(f"cannot build proposal from {spec!r}")


@dataclass
class KernelPlan:
    """Fully resolved kernel: which moves run and with what parameters."""

    kind: str                      # rw | mala | imh | isir | gl
    target: AbcTarget
    gamma: float = 0.0
    n_batch: int = 1
    scale: Optional[np.ndarray] = None
    eta: Optional[float] = None
    grad_est: Optional[GradEstimator] = None
    proposal: Optional[IndependentProposal] = None
    local_kind: str = "rw"
    flow_cfg: Optional[dict] = None  # enables flow-adaptive i-SIR proposals

    @classmethod
    def from_config(cls, kernel_cfg: dict, target: AbcTarget) -> "KernelPlan":
        cfg = dict(kernel_cfg)
        kind = cfg.get("type", "rw")
        if kind not in ("rw", "mala", "imh", "isir", "gl"):
            raise ConfigError(f"unknown kernel type {kind!r}")
        plan = cls(kind=kind, target=target)
        if kind in ("rw", "mala", "gl"):
            plan.local_kind = cfg.get("local_kind", "mala" if kind == "mala" else "rw")
        if kind in ("rw", "gl") or plan.local_kind == "rw":
            scale = cfg.get("scale", 0.2)
            plan.scale = np.broadcast_to(np.asarray(scale, dtype=float),
                                         (target.dim,)).copy()
            if (plan.scale <= 0).any():
                raise ConfigError("random-walk scale must be positive")
        if kind == "mala" or plan.local_kind == "mala":
            plan.eta = float(cfg.get("eta", 0.1))
            if plan.eta <= 0:
                raise ConfigError("MALA step size must be positive")
            plan.grad_est = build_grad_estimator(cfg.get("estimator"))
        if kind in ("imh", "isir", "gl"):
            plan.proposal = build_proposal(cfg.get("proposal", "prior"), target)
        if kind in ("isir", "gl"):
            plan.n_batch = int(cfg.get("n_batch", 10))
            if plan.n_batch < 1:
                raise ConfigError("n_batch must be >= 1")
        if kind == "gl":
            plan.gamma = float(cfg.get("gamma", 0.5))
            if not 0.0 <= plan.gamma <= 1.0:
                raise ConfigError("gamma must lie in [0, 1]")
        elif kind == "isir":
            plan.gamma = 1.0
        flow_cfg = cfg.get("flow")
        if flow_cfg and flow_cfg.get("enabled", True):
            if kind not in ("isir", "gl"):
                raise ConfigError("flow adaptation needs an i-SIR global kernel")
            plan.flow_cfg = dict(flow_cfg)
        return plan

    def cost_per_iter(self) -> float:
        """Expected simulator calls per iteration (gradient sims included)."""
        local = 1.0
        if self.local_kind == "mala" and self.grad_est is not None \
                and self.grad_est.method != "analytic":
            local += 4.0 * self.grad_est.n_seeds * self.target.dim
        if self.kind in ("rw", "mala"):
            return local
        if self.kind == "imh":
            return 1.0
        return self.gamma * self.n_batch + (1.0 - self.gamma) * local


@dataclass
class RunConfig:
    model: dict
    kernel: dict
    iterations: int
    burn_in: int = 0
    n_chains: int = 1
    seed: int = 0
    theta0: Optional[list] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            cfg = cls(
                model=dict(d["model"]),
                kernel=dict(d.get("kernel", {"type": "rw"})),
                iterations=int(d["iterations"]),
                burn_in=int(d.get("burn_in", 0)),
                n_chains=int(d.get("n_chains", 1)),
                seed=int(d.get("seed", 0)),
                theta0=d.get("theta0"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc
        if cfg.iterations <= cfg.burn_in or cfg.burn_in < 0:
            raise ConfigError("need iterations > burn_in >= 0")
        if cfg.n_chains < 1:
            raise ConfigError("n_chains must be >= 1")
        return cfg

    def resolved(self) -> dict:
        target = build_target(self.model)
        plan = KernelPlan.from_config(self.kernel, target)
        out = {
            "model": dict(self.model),
            "kernel": dict(self.kernel),
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "n_chains": self.n_chains,
            "seed": self.seed,
            "theta0": self.theta0,
            "resolved_kernel": {
                "type": plan.kind,
                "gamma": plan.gamma,
                "n_batch": plan.n_batch,
                "scale": None if plan.scale is None else plan.scale.tolist(),
                "eta": plan.eta,
                "estimator": None if plan.grad_est is None else {
                    "method": plan.grad_est.method,
                    "n_seeds": plan.grad_est.n_seeds,
                    "d_theta": np.asarray(plan.grad_est.d_theta).tolist(),
                },
                "local_kind": plan.local_kind,
                "flow": plan.flow_cfg,
                "expected_cost_per_iter": plan.cost_per_iter(),
            },
        }
        return out


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    thetas: np.ndarray      # (n, p)
    moves: np.ndarray       # (n,) uint8 codes
    accepted: np.ndarray    # (n,) bool
    sims_used: np.ndarray   # (n,) int64
    log_weight: np.ndarray  # (n,)

    @property
    def n_iters(self) -> int:
        return self.thetas.shape[0]

    @property
    def total_sims(self) -> int:
        return int(self.sims_used.sum())

    def acceptance_by_move(self) -> dict:
        out = {}
        for code, name in MOVE_NAMES.items():
            if name == "init":
                continue
            mask = self.moves == code
            out[name] = float(self.accepted[mask].mean()) if mask.any() else None
        return out

    def post_burn(self, burn_in: int) -> np.ndarray:
        return self.thetas[burn_in:]

    def save_csv(self, path: str) -> None:
        p = self.thetas.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter"] + [f"theta_{j}" for j in range(p)]
                            + ["move", "accepted", "sims_used", "log_weight"])
            for i in range(self.n_iters):
                writer.writerow(
                    [i] + [repr(float(v)) for v in self.thetas[i]]
                    + [MOVE_NAMES[int(self.moves[i])], int(self.accepted[i]),
                       int(self.sims_used[i]), repr(float(self.log_weight[i]))])

    @classmethod
    def load_csv(cls, path: str) -> "Trace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            p = sum(1 for h in header if h.startswith("theta_"))
            rows = list(reader)
        n = len(rows)
        thetas = np.empty((n, p))
        moves = np.empty(n, dtype=np.uint8)
        accepted = np.empty(n, dtype=bool)
        sims = np.empty(n, dtype=np.int64)
        logw = np.empty(n)
        for i, row in enumerate(rows):
            thetas[i] = [float(v) for v in row[1:1 + p]]
            moves[i] = MOVE_CODES[row[1 + p]]
            accepted[i] = bool(int(row[2 + p]))
            sims[i] = int(row[3 + p])
            logw[i] = float(row[4 + p])
        return cls(thetas, moves, accepted, sims, logw)


# ---------------------------------------------------------------------------
# The chain loop
# ---------------------------------------------------------------------------

@dataclass
class ChainResult:
    trace: Trace
    init_sims: int
    flow: Optional[FlowModel] = None
    flow_losses: list = field(default_factory=list)


def run_chain(target: AbcTarget, plan: KernelPlan, iterations: int,
              stream: SeedStream, theta0: Optional[np.ndarray] = None,
              abort_on_failures: bool = True) -> ChainResult:
    """Drive one chain for ``iterations`` steps and record the full trace."""
    state = init_state(target, stream.child(0xA), theta0=theta0)
    gen = stream.child(0xB).generator()
    mala_root = stream.child(0xC)

    p = target.dim
    thetas = np.empty((iterations, p))
    moves = np.empty(iterations, dtype=np.uint8)
    accepted = np.empty(iterations, dtype=bool)
    sims = np.empty(iterations, dtype=np.int64)
    logw = np.empty(iterations)

    flow = None
    buffer = None
    losses: list = []
    proposal = plan.proposal
    if plan.flow_cfg is not None:
        fc = plan.flow_cfg
        prior_mean, prior_sd = _prior_moments(target)
        flow = build_flow(p, prior_mean, prior_sd,
                          n_layers=int(fc.get("layers", 4)),
                          hidden=int(fc.get("hidden", 32)),
                          s_cap=float(fc.get("s_cap", 0.5)),
                          seed=int(fc.get("seed", 0)))
        capacity = int(fc.get("update_every", 100)) * plan.n_batch
        buffer = TrainBuffer(capacity=capacity)
        lr = float(fc.get("lr", 0.03))
        max_updates = fc.get("max_updates")  # None = keep adapting forever
        proposal = FlowProposal(flow)
        prior_mix = float(fc.get("prior_mix", 0.0))
        if prior_mix > 0.0:
            # defensive mixture: the prior backstop bounds the i-SIR weights
            proposal = MixtureOfProposals(
                [proposal, plan.proposal or PriorProposal(target.prior)],
                [1.0 - prior_mix, prior_mix])

    kind = plan.kind
    gamma = plan.gamma
    check_mask = 1023
    fails_at_start = getattr(target.simulator, "failures", 0)

    for it in range(iterations):
        if kind == "rw":
            state = _rw_move(state, target, plan.scale, gen)
        elif kind == "mala":
            state = _mala_move(state, target, plan.eta, plan.grad_est,
                               mala_root.child(it), gen)
        elif kind == "imh":
            state = _imh_move(state, target, proposal, gen)
        else:  # isir or gl
            if kind == "isir" or gen.random() < gamma:
                state, arrays = _isir_move(state, target, proposal, plan.n_batch, gen)
                if buffer is not None and (max_updates is None
                                           or len(losses) < max_updates):
                    cand_thetas, aux, log_w = arrays[0], arrays[1], arrays[2]
                    if aux is not None:
                        cand_thetas = np.column_stack([cand_thetas, aux])
                    buffer.append_batch(cand_thetas, log_w)
                    if buffer.full:
                        flow_train_step(flow, buffer, lr)
                        buffer.clear()
                        losses.append(flow.last_loss)
            elif plan.local_kind == "rw":
                state = _rw_move(state, target, plan.scale, gen)
            else:
                state = _mala_move(state, target, plan.eta, plan.grad_est,
                                   mala_root.child(it), gen)
        thetas[it] = state.point.theta
        moves[it] = MOVE_CODES[state.last_move]
        accepted[it] = state.accepted
        sims[it] = state.sims_used
        logw[it] = state.point.log_post

        if abort_on_failures and (it & check_mask) == check_mask:
            fails = getattr(target.simulator, "failures", 0) - fails_at_start
            total = int(sims[:it + 1].sum())
            if total > 200 and fails / total > 0.5:
                raise RuntimeError(
                    f"simulator hard-failure rate {fails}/{total} exceeds 50%")

    trace = Trace(thetas, moves, accepted, sims, logw)
    return ChainResult(trace=trace, init_sims=1, flow=flow, flow_losses=losses)


def _prior_moments(target: AbcTarget):
    prior = target.prior
    if hasattr(prior, "mean") and hasattr(prior, "sd"):
        return np.asarray(prior.mean, dtype=float), np.asarray(prior.sd, dtype=float)
    if hasattr(prior, "shapes"):  # gamma: mean a/b, sd sqrt(a)/b
        mean = prior.shapes / prior.rates
        sd = np.sqrt(prior.shapes) / prior.rates
        return mean, sd
    # fall back to a Monte Carlo estimate with a pinned stream
    draws = prior.sample(make_stream(0x5EED, 0).generator(), 4096)
    return draws.mean(axis=0), draws.std(axis=0)


# ---------------------------------------------------------------------------
# Multi-chain run with manifest
# ---------------------------------------------------------------------------

def _chain_worker(args):
    cfg_dict, chain_idx, out_dir = args
    cfg = RunConfig.from_dict(cfg_dict)
    target = build_target(cfg.model)
    plan = KernelPlan.from_config(cfg.kernel, target)
    stream = make_stream(cfg.seed, 0).child(0xC4A1, chain_idx)
    theta0 = None if cfg.theta0 is None else np.asarray(cfg.theta0, dtype=float)
    result = run_chain(target, plan, cfg.iterations, stream, theta0=theta0)
    path = f"{out_dir}/chain_{chain_idx}.csv"
    result.trace.save_csv(path)
    return {
        "chain": chain_idx,
        "path": path,
        "total_sims": result.trace.total_sims,
        "init_sims": result.init_sims,
        "acceptance": result.trace.acceptance_by_move(),
    }


def run(config: dict | RunConfig, out_dir: str, threads: int = 1) -> dict:
    """Execute all chains, write trace CSVs and the manifest; returns the manifest."""
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(config)
    resolved = cfg.resolved()  # validates model + kernel before any work
    t0 = time.perf_counter()
    jobs = [(_as_dict(cfg), i, out_dir) for i in range(cfg.n_chains)]
    if threads > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chain_infos = list(pool.map(_chain_worker, jobs))
    else:
        chain_infos = [_chain_worker(j) for j in jobs]
    wall = time.perf_counter() - t0

    manifest = {
        "config": resolved,
        "versions": {
            "glabc": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "seed": cfg.seed,
        "wall_clock_s": wall,
        "total_simulator_calls": int(sum(c["total_sims"] for c in chain_infos)),
        "init_simulations": int(sum(c["init_sims"] for c in chain_infos)),
        "chains": chain_infos,
    }
    with open(f"{out_dir}/manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def _as_dict(cfg: RunConfig) -> dict:
    return {
        "model": cfg.model,
        "kernel": cfg.kernel,
        "iterations": cfg.iterations,
        "burn_in": cfg.burn_in,
        "n_chains": cfg.n_chains,
        "seed": cfg.seed,
        "theta0": cfg.theta0,
    }
