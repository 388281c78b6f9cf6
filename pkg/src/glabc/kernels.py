"""MCMC transition kernels for the augmented ABC posterior.

Local moves: Gaussian random walk and Langevin (MALA) with estimated
gradients.  Global moves: independent-proposal MH and iterated sampling
importance resampling (i-SIR), which proposes a batch of candidates and
resamples the next state among them and the current one.  The global-local
kernel flips a gamma-coin between the two families each iteration.

All steps consume a :class:`~glabc.rng.SeedStream` and are replayable; the
batch of i-SIR simulations runs through the simulator's vectorized path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import AbcTarget, ParamPoint, WeightedCandidate, make_point
from .rng import SeedStream

__all__ = [
    "ChainState",
    "GlobalLocalConfig",
    "IndependentProposal",
    "PriorProposal",
    "GaussianIndependentProposal",
    "GaussianMixtureProposal",
    "UniformBoxProposal",
    "mh_accept_prob",
    "init_state",
    "local_rw_step",
    "mala_step",
    "global_imh_step",
    "isir_step",
    "gl_step",
]

logger = logging.getLogger(__name__)

NEG_INF = -np.inf


# ---------------------------------------------------------------------------
# Chain state
# ---------------------------------------------------------------------------

@dataclass
class ChainState:
    point: ParamPoint
    iter: int = 0
    last_move: str = "init"  # "local" | "global" | "init"
    accepted: bool = False
    sims_used: int = 0


def init_state(target: AbcTarget, stream: SeedStream,
               theta0: Optional[np.ndarray] = None) -> ChainState:
    """Initial state: simulate once at theta0 (default: a prior draw)."""
    if theta0 is None:
        theta0 = target.prior.sample(stream.child(0).generator(), 1)[0]
    point = make_point(target, theta0, stream.child(1))
    return ChainState(point=point, iter=0, last_move="init", accepted=False, sims_used=1)


# ---------------------------------------------------------------------------
# Independent proposals
# ---------------------------------------------------------------------------

class IndependentProposal:
    """Density + sampler over theta, independent of the chain state.

    ``pad_dim > 0`` marks proposals living on an augmented space
    (theta, aux); the flow proposal for 1-d targets uses this.
    """

    dim: int
    pad_dim: int = 0

    def sample_batch(self, gen: np.random.Generator, n: int):
        """-> (thetas (n, dim), aux (n, pad_dim) or None, logq (n,))."""
        raise NotImplementedError

    def log_density(self, thetas: np.ndarray, aux: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError

    def log_density_one(self, theta: np.ndarray, aux: Optional[np.ndarray] = None) -> float:
        t = np.atleast_2d(theta)
        a = None if aux is None else np.atleast_2d(aux)
        return float(self.log_density(t, a)[0])


class PriorProposal(IndependentProposal):
    """Use a prior object as the independent proposal."""

    def __init__(self, prior):
        self.prior = prior
        self.dim = prior.dim

    def sample_batch(self, gen, n):
        thetas = self.prior.sample(gen, n)
        return thetas, None, self.prior.log_density(thetas)

    def log_density(self, thetas, aux=None):
        return self.prior.log_density(np.atleast_2d(thetas))


class GaussianIndependentProposal(IndependentProposal):
    def __init__(self, mean, sd):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.sd = np.broadcast_to(np.asarray(sd, dtype=float), self.mean.shape).copy()
        self.dim = self.mean.size
        self._log_norm = -0.5 * self.dim * math.log(2 * math.pi) - np.log(self.sd).sum()

    def sample_batch(self, gen, n):
        thetas = self.mean + self.sd * gen.standard_normal((n, self.dim))
        return thetas, None, self.log_density(thetas)

    def log_density(self, thetas, aux=None):
        z = (np.atleast_2d(thetas) - self.mean) / self.sd
        return self._log_norm - 0.5 * (z * z).sum(axis=1)


class GaussianMixtureProposal(IndependentProposal):
    """Equal-weight mixture of isotropic Gaussians (the 'optimal' toy proposal)."""

    def __init__(self, means, sd):
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.sd = float(sd)
        self.dim = self.means.shape[1]
        self._log_norm = (-0.5 * self.dim * math.log(2 * math.pi)
                          - self.dim * math.log(self.sd) - math.log(len(self.means)))

    def sample_batch(self, gen, n):
        comp = gen.integers(0, len(self.means), size=n)
        thetas = self.means[comp] + self.sd * gen.standard_normal((n, self.dim))
        return thetas, None, self.log_density(thetas)

    def log_density(self, thetas, aux=None):
        thetas = np.atleast_2d(thetas)
        d2 = ((thetas[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        m = -0.5 * d2 / self.sd**2
        mmax = m.max(axis=1)
        return self._log_norm + mmax + np.log(np.exp(m - mmax[:, None]).sum(axis=1))


class MixtureOfProposals(IndependentProposal):
    """Defensive mixture of independent proposals.

    Mixing a learned proposal with a heavy-tailed backup (typically the
    prior) keeps the importance weights bounded by a multiple of the
    backup's, which i-SIR needs to avoid sticky heavy-tail states.  All
    components must agree on dim; pad-0 components combined with a padded
    one are treated as proposing the auxiliary coordinates from N(0, 1).
    """

    def __init__(self, components, weights):
        if len(components) != len(weights) or not components:
            raise ValueError("components and weights must align")
        w = np.asarray(weights, dtype=float)
        if (w <= 0).any():
            raise ValueError("mixture weights must be positive")
        self.weights = w / w.sum()
        self.components = list(components)
        self.dim = components[0].dim
        self.pad_dim = max(c.pad_dim for c in components)
        if any(c.dim != self.dim for c in components):
            raise ValueError("components disagree on dimension")
        if any(c.pad_dim not in (0, self.pad_dim) for c in components):
            raise ValueError("components disagree on padding")

    def _component_logq(self, comp, thetas, aux):
        logq = comp.log_density(thetas, aux if comp.pad_dim else None)
        if self.pad_dim and comp.pad_dim == 0:
            logq = logq + (-0.5 * (aux * aux).sum(axis=1)
                           - 0.5 * self.pad_dim * math.log(2 * math.pi))
        return logq

    def sample_batch(self, gen, n):
        comp_idx = gen.choice(len(self.components), size=n, p=self.weights)
        thetas = np.empty((n, self.dim))
        aux = np.empty((n, self.pad_dim)) if self.pad_dim else None
        for k, comp in enumerate(self.components):
            rows = np.where(comp_idx == k)[0]
            if rows.size == 0:
                continue
            t, a, _ = comp.sample_batch(gen, rows.size)
            thetas[rows] = t
            if self.pad_dim:
                aux[rows] = a if a is not None else gen.standard_normal(
                    (rows.size, self.pad_dim))
        return thetas, aux, self.log_density(thetas, aux)

    def log_density(self, thetas, aux=None):
        thetas = np.atleast_2d(thetas)
        parts = np.stack([
            math.log(w) + self._component_logq(c, thetas, aux)
            for c, w in zip(self.components, self.weights)])
        m = parts.max(axis=0)
        safe = np.where(m == NEG_INF, 0.0, m)
        return np.where(m == NEG_INF, NEG_INF,
                        safe + np.log(np.exp(parts - safe).sum(axis=0)))


class UniformBoxProposal(IndependentProposal):
    def __init__(self, box):
        self.box = np.atleast_2d(np.asarray(box, dtype=float))  # (p, 2)
        self.dim = self.box.shape[0]
        self._logq = -float(np.log(self.box[:, 1] - self.box[:, 0]).sum())

    def sample_batch(self, gen, n):
        u = gen.random((n, self.dim))
        thetas = self.box[:, 0] + u * (self.box[:, 1] - self.box[:, 0])
        return thetas, None, np.full(n, self._logq)

    def log_density(self, thetas, aux=None):
        thetas = np.atleast_2d(thetas)
        inside = ((thetas >= self.box[:, 0]) & (thetas <= self.box[:, 1])).all(axis=1)
        return np.where(inside, self._logq, NEG_INF)


# ---------------------------------------------------------------------------
# Metropolis-Hastings acceptance
# ---------------------------------------------------------------------------

def mh_accept_prob(current: ParamPoint, proposed: ParamPoint,
                   log_q_fwd: float, log_q_rev: float) -> float:
    """min{1, [pi(t*) K(x*,y) q(t|t*)] / [pi(t) K(x,y) q(t*|t)]} in log space.

    A zero-weight current state accepts any positive-weight proposal; two
    zero-weight states stay put.
    """
    lp_cur = current.log_post
    lp_new = proposed.log_post
    if lp_new == NEG_INF:
        if lp_cur == NEG_INF:
            logger.debug("degenerate MH step: both states have zero weight")
        return 0.0
    if lp_cur == NEG_INF:
        return 1.0
    log_ratio = (lp_new + log_q_rev) - (lp_cur + log_q_fwd)
    if log_ratio >= 0.0:
        return 1.0
    return math.exp(log_ratio)


# ---------------------------------------------------------------------------
# Local kernels
# ---------------------------------------------------------------------------

def _rw_move(state: ChainState, target: AbcTarget, scale: np.ndarray,
             gen: np.random.Generator) -> ChainState:
    theta = state.point.theta
    theta_new = theta + scale * gen.standard_normal(theta.size)
    lp = target.log_prior_one(theta_new)
    x = target.simulator.simulate_gen(theta_new[None, :], gen)[0]
    lk = float(target.kernel.log_weight(x, target.observed))
    proposed = ParamPoint(theta_new, lp, x, lk)
    alpha = mh_accept_prob(state.point, proposed, 0.0, 0.0)
    accept = gen.random() < alpha
    point = proposed if accept else state.point
    return ChainState(point, state.iter + 1, "local", bool(accept), 1)


def local_rw_step(state: ChainState, target: AbcTarget, scale,
                  stream: SeedStream) -> ChainState:
    """Symmetric Gaussian random-walk MH step; exactly one simulation."""
    scale = np.broadcast_to(np.asarray(scale, dtype=float), state.point.theta.shape)
    if (scale <= 0).any():
        raise ValueError("random-walk scale must be positive")
    return _rw_move(state, target, scale, stream.generator())


def _mala_move(state: ChainState, target: AbcTarget, eta: float, grad_est,
               stream: SeedStream, gen: np.random.Generator) -> ChainState:
    from .grad import estimate_grad  # local import; grad depends on model only

    theta = state.point.theta
    p = theta.size
    res_fwd = estimate_grad(target, theta, grad_est, stream.child(0xF0))
    sims = res_fwd.n_sims
    g_prior = target.prior.grad_log_density(theta)
    grad_cur = res_fwd.grad + g_prior

    if res_fwd.degenerate or not np.isfinite(grad_cur).all():
        # tail rescue: fall back to a plain random walk this iteration
        logger.debug("MALA gradient degenerate at %s; random-walk fallback", theta)
        out = _rw_move(state, target, np.full(p, eta), gen)
        out.sims_used += sims
        return out

    mean_fwd = theta + 0.5 * eta * eta * grad_cur
    theta_new = mean_fwd + eta * gen.standard_normal(p)
    lp = target.log_prior_one(theta_new)
    x = target.simulator.simulate_gen(theta_new[None, :], gen)[0]
    lk = float(target.kernel.log_weight(x, target.observed))
    proposed = ParamPoint(theta_new, lp, x, lk)
    sims += 1

    res_rev = estimate_grad(target, theta_new, grad_est, stream.child(0xF1))
    sims += res_rev.n_sims
    g_prior_new = target.prior.grad_log_density(theta_new)
    grad_new = res_rev.grad + g_prior_new
    if res_rev.degenerate or not np.isfinite(grad_new).all():
        # no usable reverse density: reject rather than fake a ratio
        return ChainState(state.point, state.iter + 1, "local", False, sims)

    mean_rev = theta_new + 0.5 * eta * eta * grad_new
    log_q_fwd = -0.5 * float(((theta_new - mean_fwd) / eta) ** 2 @ np.ones(p))
    log_q_rev = -0.5 * float(((theta - mean_rev) / eta) ** 2 @ np.ones(p))
    alpha = mh_accept_prob(state.point, proposed, log_q_fwd, log_q_rev)
    accept = gen.random() < alpha
    point = proposed if accept else state.point
    return ChainState(point, state.iter + 1, "local", bool(accept), sims)


def mala_step(state: ChainState, target: AbcTarget, eta: float, grad_est,
              stream: SeedStream) -> ChainState:
    """Langevin proposal with estimated gradient and full asymmetric MH ratio.

    The reverse proposal density is computed with a freshly estimated
    gradient at the proposed point; simulation counts include both gradient
    estimates.  With estimated gradients the chain is approximate
    (noisy-gradient MH, no pseudo-marginal correction).
    """
    if eta <= 0:
        raise ValueError("MALA step size must be positive")
    return _mala_move(state, target, float(eta), grad_est, stream, stream.generator())


# ---------------------------------------------------------------------------
# Global kernels
# ---------------------------------------------------------------------------

def _imh_move(state: ChainState, target: AbcTarget, proposal: IndependentProposal,
              gen: np.random.Generator) -> ChainState:
    thetas, aux, logq = proposal.sample_batch(gen, 1)
    theta_new = thetas[0]
    if logq[0] == NEG_INF:
        raise ValueError("independent proposal sampled a zero-density point "
                         "(sampler/density mismatch)")
    lp = target.log_prior_one(theta_new)
    x = target.simulator.simulate_gen(theta_new[None, :], gen)[0]
    lk = float(target.kernel.log_weight(x, target.observed))
    proposed = ParamPoint(theta_new, lp, x, lk)
    log_q_rev = proposal.log_density_one(state.point.theta)
    alpha = mh_accept_prob(state.point, proposed, float(logq[0]), log_q_rev)
    accept = gen.random() < alpha
    point = proposed if accept else state.point
    return ChainState(point, state.iter + 1, "global", bool(accept), 1)


def global_imh_step(state: ChainState, target: AbcTarget,
                    proposal: IndependentProposal, stream: SeedStream) -> ChainState:
    """Independent-proposal MH: one candidate, one simulation."""
    return _imh_move(state, target, proposal, stream.generator())


def _isir_move(state: ChainState, target: AbcTarget, proposal: IndependentProposal,
               n_batch: int, gen: np.random.Generator, collect: bool = True):
    """One i-SIR stage; returns (new_state, fresh-candidate arrays).

    Arrays: (thetas (N,p), aux or None, log_w (N,), logq (N,), sims list).
    """
    thetas, aux, logq = proposal.sample_batch(gen, n_batch)
    xs = target.simulator.simulate_gen(thetas, gen)
    logk = target.kernel.log_weight_batch(xs, target.observed)
    logp = target.prior.log_density(thetas)
    log_w = logp + logk - logq

    # weight of the retained state under the same proposal
    cur = state.point
    if proposal.pad_dim > 0:
        aux0 = gen.standard_normal(proposal.pad_dim)
        aux_logp = -0.5 * float(aux0 @ aux0) - 0.5 * proposal.pad_dim * math.log(2 * math.pi)
        aux_logp_fresh = (-0.5 * (aux * aux).sum(axis=1)
                          - 0.5 * proposal.pad_dim * math.log(2 * math.pi))
        log_w = log_w + aux_logp_fresh
        logq0 = proposal.log_density_one(cur.theta, aux0)
        log_w0 = cur.log_post + aux_logp - logq0
    else:
        logq0 = proposal.log_density_one(cur.theta)
        log_w0 = cur.log_post - logq0 if cur.log_post > NEG_INF else NEG_INF

    all_w = np.concatenate([[log_w0], log_w])
    m = all_w.max()
    if m == NEG_INF:
        new_state = ChainState(cur, state.iter + 1, "global", False, n_batch)
        return new_state, (thetas, aux, log_w, logq, logp, logk, xs)

    probs = np.exp(all_w - m)
    probs /= probs.sum()
    idx = int(np.searchsorted(np.cumsum(probs), gen.random()))
    idx = min(idx, n_batch)

    if idx == 0:
        new_state = ChainState(cur, state.iter + 1, "global", False, n_batch)
    else:
        j = idx - 1
        point = ParamPoint(thetas[j], float(logp[j]), xs[j], float(logk[j]))
        new_state = ChainState(point, state.iter + 1, "global", True, n_batch)
    return new_state, (thetas, aux, log_w, logq, logp, logk, xs)


def isir_step(state: ChainState, target: AbcTarget, proposal: IndependentProposal,
              n_batch: int, stream: SeedStream):
    """Single i-SIR stage (exactly ``n_batch`` simulations).

    Returns the new state plus the fresh weighted candidates, which callers
    may recycle as flow training data or discard.
    """
    if n_batch < 1:
        raise ValueError("i-SIR batch size must be >= 1")
    new_state, (thetas, aux, log_w, logq, logp, logk, xs) = _isir_move(
        state, target, proposal, int(n_batch), stream.generator())
    candidates = [
        WeightedCandidate(
            point=ParamPoint(thetas[j], float(logp[j]), xs[j], float(logk[j])),
            log_weight=float(log_w[j]),
            proposal_logdensity=float(logq[j]),
            aux=None if aux is None else aux[j],
        )
        for j in range(thetas.shape[0])
    ]
    return new_state, candidates


# ---------------------------------------------------------------------------
# Global-local mixture
# ---------------------------------------------------------------------------

@dataclass
class GlobalLocalConfig:
    """Mixture kernel: global i-SIR with probability gamma, else local.

    ``local_kind`` selects the local family: "rw" (needs ``scale``) or
    "mala" (needs ``eta`` and ``grad_est``).
    """

    gamma: float
    n_batch: int
    proposal: IndependentProposal
    local_kind: str = "rw"
    scale: Optional[np.ndarray] = None
    eta: Optional[float] = None
    grad_est: object = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.n_batch < 1:
            raise ValueError("n_batch must be >= 1")
        if self.local_kind not in ("rw", "mala"):
            raise ValueError(f"unknown local kernel: {self.local_kind}")


def gl_step(state: ChainState, cfg: GlobalLocalConfig, target: AbcTarget,
            stream: SeedStream):
    """Global-local step: i-SIR with probability gamma, local move otherwise.

    Returns (state, candidates-or-None); candidates are only produced by
    global moves.
    """
    gen = stream.generator()
    if gen.random() < cfg.gamma:
        new_state, arrays = _isir_move(state, target, cfg.proposal, cfg.n_batch, gen)
        thetas, aux, log_w, logq, logp, logk, xs = arrays
        candidates = [
            WeightedCandidate(ParamPoint(thetas[j], float(logp[j]), xs[j], float(logk[j])),
                              float(log_w[j]), float(logq[j]),
                              None if aux is None else aux[j])
            for j in range(thetas.shape[0])
        ]
        return new_state, candidates
    if cfg.local_kind == "rw":
        scale = np.broadcast_to(np.asarray(cfg.scale, dtype=float),
                                state.point.theta.shape)
        return _rw_move(state, target, scale, gen), None
    return _mala_move(state, target, float(cfg.eta), cfg.grad_est,
                      stream.child(0xA1A), gen), None
