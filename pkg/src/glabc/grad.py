"""Finite-difference estimators of the ABC log-likelihood gradient.

All estimators are central differences of the kernel-smoothed log
likelihood, differing in how simulation noise is handled:

* ``mc_random`` -- independent simulations on each side (the baseline);
* ``crn_mean`` -- both sides share one common-random-number panel, so the
  simulator noise cancels in the difference;
* ``crn_max`` -- CRN, but each side keeps only its best seed (small-kernel
  approximation);
* ``gaussian_crn`` -- CRN simulations summarized by a fitted Gaussian per
  output channel, stable deep in the tails where log-of-sum estimates blow
  up;
* ``analytic`` -- delegate to the target's closed form, when it has one.

Each coordinate uses its own fresh panel; reusing a panel across
coordinates would correlate the gradient components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np

from .model import AbcTarget
from .rng import CrnPanel, SeedStream, fresh_panel

__all__ = ["GradEstimator", "GradResult", "loglik_crn", "estimate_grad",
           "grad_crn_mean", "grad_crn_max", "grad_gaussian_crn", "grad_mc_random"]

NEG_INF = -np.inf

_METHODS = ("mc_random", "crn_max", "crn_mean", "gaussian_crn", "analytic")


@dataclass
class GradEstimator:
    """Estimator choice plus its budget: S seeds per side, per-coordinate step."""

    method: str = "crn_mean"
    n_seeds: int = 100
    d_theta: np.ndarray | float = 0.05

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown gradient method: {self.method!r}")
        if self.method != "analytic":
            if self.n_seeds < 1:
                raise ValueError("n_seeds must be >= 1")
            if self.method == "gaussian_crn" and self.n_seeds < 2:
                raise ValueError("gaussian_crn needs n_seeds >= 2 for a variance estimate")
        d = np.asarray(self.d_theta, dtype=float)
        if (d <= 0).any():
            raise ValueError("d_theta must be positive componentwise")

    def steps(self, p: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.d_theta, dtype=float), (p,))


@dataclass
class GradResult:
    grad: np.ndarray
    per_side_loglik: np.ndarray  # (p, 2): plus-side, minus-side log likelihoods
    degenerate: bool = False
    n_sims: int = 0


def _log_kernels(target: AbcTarget, theta: np.ndarray, panel: CrnPanel) -> np.ndarray:
    xs = target.simulator.simulate_crn(theta, panel)
    return target.kernel.log_weight_batch(xs, target.observed)


def loglik_crn(target: AbcTarget, theta: np.ndarray, panel: CrnPanel) -> float:
    """log sum_s K_eps(f(theta, w_s), y); -inf when every kernel value is zero.

    Unnormalized by S: the constant cancels in central differences.
    """
    lk = _log_kernels(target, np.asarray(theta, dtype=float), panel)
    m = lk.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + math.log(np.exp(lk - m).sum()))


def _central_difference(target, theta, est, stream, side_stat, shared_panel: bool):
    """Generic central-difference loop over coordinates.

    ``side_stat(theta_side, panel) -> float`` maps one perturbed parameter
    and a panel to a side statistic whose difference/(2d) estimates the
    gradient.  ``shared_panel`` controls CRN seed sharing across the two
    sides of each coordinate.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    p = theta.size
    d = est.steps(p)
    grad = np.empty(p)
    sides = np.empty((p, 2))
    degenerate = False
    n_sims = 0
    for j in range(p):
        coord_stream = stream.child(j)
        if shared_panel:
            panel_plus = panel_minus = fresh_panel(coord_stream, est.n_seeds)
        else:
            panel_plus = fresh_panel(coord_stream.child(0), est.n_seeds)
            panel_minus = fresh_panel(coord_stream.child(1), est.n_seeds)
        tp = theta.copy()
        tp[j] += d[j]
        tm = theta.copy()
        tm[j] -= d[j]
        lp = side_stat(tp, panel_plus)
        lm = side_stat(tm, panel_minus)
        n_sims += 2 * est.n_seeds
        sides[j, 0] = lp
        sides[j, 1] = lm
        if not (math.isfinite(lp) and math.isfinite(lm)):
            grad[j] = np.nan
            degenerate = True
        else:
            grad[j] = (lp - lm) / (2.0 * d[j])
    return GradResult(grad=grad, per_side_loglik=sides, degenerate=degenerate,
                      n_sims=n_sims)


def grad_crn_mean(target: AbcTarget, theta, est: GradEstimator,
                  stream: SeedStream) -> GradResult:
    """Central difference of log-sum kernel values with shared seeds per side."""
    return _central_difference(
        target, theta, est, stream,
        side_stat=lambda t, panel: loglik_crn(target, t, panel),
        shared_panel=True)


def grad_mc_random(target: AbcTarget, theta, est: GradEstimator,
                   stream: SeedStream) -> GradResult:
    """Like crn_mean but with independent panels per side (no noise cancellation)."""
    return _central_difference(
        target, theta, est, stream,
        side_stat=lambda t, panel: loglik_crn(target, t, panel),
        shared_panel=False)


def grad_crn_max(target: AbcTarget, theta, est: GradEstimator,
                 stream: SeedStream) -> GradResult:
    """Per side, keep only the seed maximizing the kernel value."""

    def best_seed(t, panel):
        lk = _log_kernels(target, t, panel)
        return float(lk.max())

    return _central_difference(target, theta, est, stream,
                               side_stat=best_seed, shared_panel=True)


def grad_gaussian_crn(target: AbcTarget, theta, est: GradEstimator,
                      stream: SeedStream) -> GradResult:
    """Gaussian-likelihood fit per side with shared seeds.

    Per side the S simulated outputs are summarized by their sample mean and
    variance; the gradient combines the two fitted N(mu, sigma^2 + eps^2)
    log densities at the observation.  Written for scalar outputs; for
    multivariate output the per-channel terms are summed (diagonal fit,
    experimental).
    """
    eps2 = float(target.kernel.eps) ** 2
    y = np.asarray(target.observed, dtype=float).ravel()

    def gauss_fit_loglik(t, panel):
        xs = np.asarray(target.simulator.simulate_crn(t, panel), dtype=float)
        if xs.ndim == 1:
            xs = xs[:, None]
        if not np.isfinite(xs).all():
            return NEG_INF
        mu = xs.mean(axis=0)
        var = xs.var(axis=0, ddof=1)
        if not np.isfinite(var).all():
            return NEG_INF
        tot = var + eps2
        # sum over channels of log N(y; mu, var + eps^2), constants dropped
        return float((-0.5 * np.log(tot) - (y - mu) ** 2 / (2.0 * tot)).sum())

    return _central_difference(target, theta, est, stream,
                               side_stat=gauss_fit_loglik, shared_panel=True)


def estimate_grad(target: AbcTarget, theta, est: GradEstimator,
                  stream: SeedStream) -> GradResult:
    """Dispatch on the estimator method."""
    if est.method == "analytic":
        if target.analytic_grad_loglik is None:
            raise ValueError(f"target {target.name!r} has no analytic gradient")
        g = np.atleast_1d(np.asarray(
            target.analytic_grad_loglik(np.atleast_1d(theta)), dtype=float))
        return GradResult(grad=g, per_side_loglik=np.zeros((g.size, 2)),
                          degenerate=not np.isfinite(g).all(), n_sims=0)
    fn = {
        "mc_random": grad_mc_random,
        "crn_max": grad_crn_max,
        "crn_mean": grad_crn_mean,
        "gaussian_crn": grad_gaussian_crn,
    }[est.method]
    return fn(target, theta, est, stream)
