"""Affine-coupling normalizing flow with exact density and analytic backprop.

The flow is a fixed whitening layer (centres the base on the prior's
moments) followed by RealNVP-style coupling layers whose scale/shift nets
are tiny tanh MLPs.  Density evaluation, sampling, and the gradient of the
weighted forward-KL loss are all closed form, so no autodiff framework is
needed.  Training follows the recycled-candidate scheme: i-SIR candidates
accumulate in a buffer and every flush performs one plain gradient-descent
update of the net parameters.

One-dimensional targets are padded with an auxiliary standard-normal
coordinate (coupling layers need at least two coordinates); the sampler and
the i-SIR weights then live on the augmented space, whose theta-marginal is
unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernels import IndependentProposal, ChainState, isir_step
from .model import AbcTarget
from .rng import SeedStream

__all__ = [
    "FlowModel",
    "TrainBuffer",
    "FlowProposal",
    "build_flow",
    "flow_logdensity",
    "flow_sample",
    "flow_train_step",
    "isir_nf_step",
]

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


class _Mlp:
    """dense(tanh) x2 -> linear head; caches forward activations for backprop."""

    def __init__(self, d_in: int, d_out: int, hidden: int, gen: np.random.Generator):
        s1 = 1.0 / math.sqrt(d_in)
        s2 = 1.0 / math.sqrt(hidden)
        self.W1 = s1 * gen.standard_normal((d_in, hidden))
        self.b1 = np.zeros(hidden)
        self.W2 = s2 * gen.standard_normal((hidden, hidden))
        self.b2 = np.zeros(hidden)
        # zero head: the coupling layer starts as the identity map
        self.W3 = np.zeros((hidden, d_out))
        self.b3 = np.zeros(d_out)

    def forward(self, x: np.ndarray):
        h1 = np.tanh(x @ self.W1 + self.b1)
        h2 = np.tanh(h1 @ self.W2 + self.b2)
        out = h2 @ self.W3 + self.b3
        return out, (x, h1, h2)

    def backward(self, grad_out: np.ndarray, cache):
        x, h1, h2 = cache
        gW3 = h2.T @ grad_out
        gb3 = grad_out.sum(axis=0)
        d2 = (grad_out @ self.W3.T) * (1.0 - h2 * h2)
        gW2 = h1.T @ d2
        gb2 = d2.sum(axis=0)
        d1 = (d2 @ self.W2.T) * (1.0 - h1 * h1)
        gW1 = x.T @ d1
        gb1 = d1.sum(axis=0)
        grad_x = d1 @ self.W1.T
        return (gW1, gb1, gW2, gb2, gW3, gb3), grad_x

    @property
    def param_list(self):
        return [self.W1, self.b1, self.W2, self.b2, self.W3, self.b3]


class _Coupling:
    """One affine coupling layer; ``mask`` marks the pass-through coordinates."""

    def __init__(self, mask: np.ndarray, hidden: int, s_cap: float,
                 gen: np.random.Generator):
        self.mask = mask.astype(float)          # 1 = conditioned on, unchanged
        self.free = 1.0 - self.mask             # 1 = transformed
        d = mask.size
        self.s_net = _Mlp(d, d, hidden, gen)
        self.t_net = _Mlp(d, d, hidden, gen)
        self.s_cap = float(s_cap)

    def _nets(self, xm: np.ndarray):
        raw_s, cache_s = self.s_net.forward(xm)
        t, cache_t = self.t_net.forward(xm)
        th = np.tanh(raw_s)
        s = self.s_cap * th * self.free
        t = t * self.free
        return s, t, th, cache_s, cache_t

    def forward(self, u: np.ndarray):
        """Sampling direction; returns (out, sum of scale outputs per row)."""
        xm = u * self.mask
        s, t, _, _, _ = self._nets(xm)
        out = xm + self.free * (u * np.exp(s) + t)
        return out, s.sum(axis=1)

    def inverse(self, y: np.ndarray):
        """Density direction; returns (x, logdet contribution, cache)."""
        xm = y * self.mask
        s, t, th, cache_s, cache_t = self._nets(xm)
        x = xm + self.free * (y - t) * np.exp(-s)
        return x, -s.sum(axis=1), (y, x, s, th, cache_s, cache_t)

    def backward(self, grad_x: np.ndarray, w: np.ndarray, cache):
        """Reverse-mode through ``inverse`` plus the direct logdet path.

        ``grad_x`` is dL/d(inverse output); ``w`` is the per-row weight of
        the +sum(s) term that the loss carries for this layer.  Returns
        (dL/dy, parameter gradients).
        """
        y, x, s, th, cache_s, cache_t = cache
        e = np.exp(-s)
        gx_free = grad_x * self.free
        # x_free = (y_free - t) * exp(-s):  dL/ds gets -gx*x, dL/dt gets -gx*e
        ds = -gx_free * x + w[:, None] * self.free
        dt = -gx_free * e
        draw_s = ds * self.s_cap * (1.0 - th * th)
        grads_s, dxm_s = self.s_net.backward(draw_s, cache_s)
        grads_t, dxm_t = self.t_net.backward(dt, cache_t)
        grad_y = gx_free * e + (grad_x + dxm_s + dxm_t) * self.mask
        return grad_y, grads_s + grads_t

    @property
    def param_list(self):
        return self.s_net.param_list + self.t_net.param_list


@dataclass
class FlowModel:
    """Invertible map with tractable density on R^dim (>= 2 coordinates)."""

    dim: int
    target_dim: int
    mean: np.ndarray
    sd: np.ndarray
    layers: list = field(default_factory=list)
    last_loss: Optional[float] = None

    @property
    def pad_dim(self) -> int:
        return self.dim - self.target_dim

    # -- density / sampling ------------------------------------------------

    def _whiten(self, thetas: np.ndarray) -> np.ndarray:
        return (thetas - self.mean) / self.sd

    def log_density(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        v = self._whiten(thetas)
        logdet = -np.log(self.sd).sum() * np.ones(thetas.shape[0])
        for layer in reversed(self.layers):
            v, ld, _ = layer.inverse(v)
            logdet += ld
        log_base = -0.5 * (v * v).sum(axis=1) - 0.5 * self.dim * _LOG_2PI
        return log_base + logdet

    def sample_batch(self, gen: np.random.Generator, n: int):
        u = gen.standard_normal((n, self.dim))
        log_base = -0.5 * (u * u).sum(axis=1) - 0.5 * self.dim * _LOG_2PI
        v = u
        s_total = np.zeros(n)
        for layer in self.layers:
            v, s_sum = layer.forward(v)
            s_total += s_sum
        thetas = self.mean + self.sd * v
        logq = log_base - s_total - np.log(self.sd).sum()
        return thetas, logq

    def inverse(self, thetas: np.ndarray) -> np.ndarray:
        v = self._whiten(np.atleast_2d(thetas))
        for layer in reversed(self.layers):
            v, _, _ = layer.inverse(v)
        return v

    # -- parameters ----------------------------------------------------------

    def _all_param_arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.param_list)
        return out

    def get_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._all_param_arrays()])

    def set_params(self, flat: np.ndarray) -> None:
        k = 0
        for a in self._all_param_arrays():
            a[...] = flat[k:k + a.size].reshape(a.shape)
            k += a.size
        if k != flat.size:
            raise ValueError("parameter vector has the wrong length")

    def save(self, path: str) -> None:
        arrays = {f"p{i}": a for i, a in enumerate(self._all_param_arrays())}
        np.savez(path, dim=self.dim, target_dim=self.target_dim,
                 mean=self.mean, sd=self.sd, n_layers=len(self.layers),
                 hidden=self.layers[0].s_net.W1.shape[1],
                 s_cap=self.layers[0].s_cap, **arrays)

    # -- training ------------------------------------------------------------

    def loss_and_grad(self, thetas: np.ndarray, weights: np.ndarray):
        """Weighted forward-KL surrogate: L = -sum_i W_i log p_T(theta_i).

        Returns (loss, flat gradient over all net parameters).
        """
        thetas = np.atleast_2d(thetas)
        w = np.asarray(weights, dtype=float)
        v = self._whiten(thetas)
        caches = []
        logdet = -np.log(self.sd).sum() * np.ones(thetas.shape[0])
        for layer in reversed(self.layers):
            v, ld, cache = layer.inverse(v)
            caches.append(cache)
        u = v
        log_p = (-0.5 * (u * u).sum(axis=1) - 0.5 * self.dim * _LOG_2PI + logdet)
        for cache in caches:
            # subtract each layer's sum(s) (cache[2] holds s)
            log_p = log_p - cache[2].sum(axis=1)
        loss = float(-(w * log_p).sum())

        grad_u = w[:, None] * u  # d(-w log N(u))/du
        grads = []
        # caches were appended for layers K..1; walk back 1..K toward theta
        for layer, cache in zip(self.layers, reversed(caches)):
            grad_u, layer_grads = layer.backward(grad_u, w, cache)
            grads.append(layer_grads)
        flat = np.concatenate([
            g.ravel() for layer_grads in grads for g in layer_grads
        ])
        return loss, flat

    def apply_grad(self, flat_grad: np.ndarray, lr: float) -> None:
        k = 0
        for a in self._all_param_arrays():
            a -= lr * flat_grad[k:k + a.size].reshape(a.shape)
            k += a.size


def load_flow(path: str) -> FlowModel:
    data = np.load(path)
    td = int(data["target_dim"])
    model = build_flow(td, prior_mean=data["mean"][:td], prior_sd=data["sd"][:td],
                       n_layers=int(data["n_layers"]), hidden=int(data["hidden"]),
                       s_cap=float(data["s_cap"]))
    for i, a in enumerate(model._all_param_arrays()):
        a[...] = data[f"p{i}"]
    return model


def build_flow(target_dim: int, prior_mean, prior_sd, n_layers: int = 4,
               hidden: int = 32, s_cap: float = 0.5, seed: int = 0) -> FlowModel:
    """Identity-initialized coupling flow standardized to the prior moments.

    The initial density equals N(prior_mean, diag(prior_sd^2)) exactly,
    guaranteeing prior-scale coverage before any training.  1-d targets gain
    one auxiliary N(0, 1) padding coordinate.
    """
    target_dim = int(target_dim)
    dim = max(target_dim, 2)
    pad = dim - target_dim
    mean = np.concatenate([np.broadcast_to(np.asarray(prior_mean, dtype=float),
                                           (target_dim,)), np.zeros(pad)])
    sd = np.concatenate([np.broadcast_to(np.asarray(prior_sd, dtype=float),
                                         (target_dim,)), np.ones(pad)])
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([0xF10, seed])))
    layers = []
    for l in range(n_layers):
        mask = (np.arange(dim) + l) % 2 == 0
        layers.append(_Coupling(mask, hidden, s_cap, gen))
    return FlowModel(dim=dim, target_dim=target_dim, mean=mean, sd=sd, layers=layers)


# ---------------------------------------------------------------------------
# Spec-level operations
# ---------------------------------------------------------------------------

def flow_logdensity(model: FlowModel, theta: np.ndarray) -> float:
    """Exact log p_T(theta) via change of variables through the couplings."""
    return float(model.log_density(np.atleast_2d(theta))[0])


def flow_sample(model: FlowModel, stream: SeedStream):
    """One draw theta = T(u), u ~ base, with its exact log density."""
    thetas, logq = model.sample_batch(stream.generator(), 1)
    return thetas[0], float(logq[0])


@dataclass
class TrainBuffer:
    """Recycled i-SIR candidates awaiting one flow update.

    Weights are kept in log space; normalization happens per flush window
    only.  ``capacity`` is the flush threshold S * N_b.
    """

    capacity: int
    thetas: list = field(default_factory=list)
    log_weights: list = field(default_factory=list)
    _n: int = 0

    @property
    def size(self) -> int:
        return self._n

    @property
    def full(self) -> bool:
        return self._n >= self.capacity

    def append_batch(self, thetas: np.ndarray, log_weights: np.ndarray) -> None:
        self.thetas.append(np.atleast_2d(thetas).copy())
        self.log_weights.append(np.asarray(log_weights, dtype=float).copy())
        self._n += len(log_weights)

    def contents(self):
        return np.concatenate(self.thetas, axis=0), np.concatenate(self.log_weights)

    def clear(self) -> None:
        self.thetas.clear()
        self.log_weights.clear()
        self._n = 0


def flow_train_step(model: FlowModel, buffer: TrainBuffer, lr: float) -> FlowModel:
    """One gradient-descent update on the self-normalized buffer loss.

    Weights are normalized within the buffer window (softmax of the stored
    log weights); an all-zero-weight buffer skips the update with a warning.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    thetas, log_w = buffer.contents()
    m = log_w.max() if log_w.size else -np.inf
    if not np.isfinite(m):
        logger.warning("flow update skipped: all buffer weights are zero")
        return model
    w = np.exp(log_w - m)
    w /= w.sum()
    loss, grad = model.loss_and_grad(thetas, w)
    model.apply_grad(grad, lr)
    model.last_loss = loss
    logger.debug("flow update: loss %.6f over %d candidates", loss, len(w))
    return model


class FlowProposal(IndependentProposal):
    """Expose a FlowModel as an i-SIR independent proposal.

    For padded models the proposal operates on (theta, aux) jointly and the
    kernel machinery folds the auxiliary N(0,1) prior into the weights.
    """

    def __init__(self, model: FlowModel):
        self.model = model
        self.dim = model.target_dim
        self.pad_dim = model.pad_dim

    def sample_batch(self, gen, n):
        full, logq = self.model.sample_batch(gen, n)
        thetas = full[:, :self.dim]
        aux = full[:, self.dim:] if self.pad_dim else None
        return thetas, aux, logq

    def log_density(self, thetas, aux=None):
        thetas = np.atleast_2d(thetas)
        if self.pad_dim:
            if aux is None:
                raise ValueError("padded flow density needs the aux coordinates")
            full = np.column_stack([thetas, np.atleast_2d(aux)])
        else:
            full = thetas
        return self.model.log_density(full)


def isir_nf_step(state: ChainState, model: FlowModel, target: AbcTarget,
                 n_batch: int, lr: float, buffer: TrainBuffer,
                 stream: SeedStream):
    """i-SIR stage with the flow as proposal, recycling candidates for training.

    Fresh candidates enter the buffer; once it reaches capacity (S stages'
    worth, S * n_batch candidates) one training step runs and the buffer is
    emptied, so updates happen every S-th stage.
    """
    proposal = FlowProposal(model)
    new_state, candidates = isir_step(state, target, proposal, n_batch, stream)
    thetas = np.stack([
        c.point.theta if c.aux is None else np.concatenate([c.point.theta, c.aux])
        for c in candidates
    ])
    log_w = np.array([c.log_weight for c in candidates])
    buffer.append_batch(thetas, log_w)
    if buffer.full:
        flow_train_step(model, buffer, lr)
        buffer.clear()
    return new_state, model, buffer
