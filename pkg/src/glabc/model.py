"""ABC target definition: prior, simulator, discrepancy kernel, tolerance.

The target bundles everything needed to evaluate the unnormalized augmented
posterior ``prior(theta) * p(x | theta) * K_eps(x, y)``, with ``p(x | theta)``
realized by simulation.  All arithmetic is in log space; a candidate whose
kernel or prior factor vanishes carries ``-inf``, never NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .rng import SeedStream

__all__ = [
    "Prior",
    "GaussianPrior",
    "GammaPrior",
    "ShapedPrior",
    "GaussianKernel",
    "DiscrepancyGaussianKernel",
    "Simulator",
    "LocationSimulator",
    "ParamPoint",
    "AbcTarget",
    "WeightedCandidate",
    "simulate",
    "simulate_batch",
    "kernel_weight",
    "log_kernel_weight",
    "log_unnorm_posterior",
    "prior_sample",
    "make_point",
]

_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

class Prior:
    """Density + sampler over R^p.  Subclasses implement the batch forms."""

    dim: int = 1

    def log_density(self, thetas: np.ndarray) -> np.ndarray:
        """Log density for each row of ``thetas`` (n, p) -> (n,)."""
        raise NotImplementedError

    def sample(self, gen: np.random.Generator, n: int) -> np.ndarray:
        """(n, p) draws."""
        raise NotImplementedError

    def grad_log_density(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of log density at a single point; NaN if unavailable."""
        return np.full(self.dim, np.nan)

    def log_density_one(self, theta: np.ndarray) -> float:
        return float(self.log_density(np.atleast_2d(theta))[0])


class GaussianPrior(Prior):
    """Independent normal prior N(mean, diag(sd^2))."""

    def __init__(self, mean, sd):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.sd = np.broadcast_to(np.asarray(sd, dtype=float), self.mean.shape).copy()
        self.dim = self.mean.size
        self._log_norm = -0.5 * self.dim * _LOG_2PI - np.log(self.sd).sum()

    def log_density(self, thetas):
        thetas = np.atleast_2d(thetas)
        z = (thetas - self.mean) / self.sd
        return self._log_norm - 0.5 * (z * z).sum(axis=1)

    def sample(self, gen, n):
        return self.mean + self.sd * gen.standard_normal((n, self.dim))

    def grad_log_density(self, theta):
        return -(np.asarray(theta, dtype=float) - self.mean) / (self.sd**2)


class GammaPrior(Prior):
    """Product of independent Gamma(shape, rate) marginals on theta >= 0."""

    def __init__(self, shapes: Sequence[float], rates: Sequence[float]):
        self.shapes = np.asarray(shapes, dtype=float)
        self.rates = np.asarray(rates, dtype=float)
        if self.shapes.shape != self.rates.shape:
            raise ValueError("shapes and rates must align")
        self.dim = self.shapes.size
        self._log_norm = (self.shapes * np.log(self.rates)
                          - np.array([math.lgamma(a) for a in self.shapes])).sum()

    def log_density(self, thetas):
        thetas = np.atleast_2d(thetas)
        out = np.full(thetas.shape[0], -np.inf)
        ok = (thetas > 0).all(axis=1)
        if ok.any():
            t = thetas[ok]
            out[ok] = (self._log_norm
                       + ((self.shapes - 1.0) * np.log(t)).sum(axis=1)
                       - (self.rates * t).sum(axis=1))
        return out

    def sample(self, gen, n):
        return gen.gamma(self.shapes, 1.0 / self.rates, size=(n, self.dim))

    def grad_log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        if (theta <= 0).any():
            return np.full(self.dim, np.nan)
        return (self.shapes - 1.0) / theta - self.rates

    @property
    def mean(self):
        return self.shapes / self.rates


class ShapedPrior(Prior):
    """Unnormalized 2-d prior of the form N(t1) x N(t2 - m(t1)) on a box.

    Used by the curved synthetic targets: the second coordinate is normal
    around a deterministic curve of the first.  Sampling is direct draw plus
    rejection against the box, so density and sampler agree up to the box
    normalization (a constant, which all ratio-based algebra ignores).
    """

    def __init__(self, sd1: float, curve: Callable[[np.ndarray], np.ndarray],
                 sd2: float, box: np.ndarray):
        self.sd1 = float(sd1)
        self.curve = curve
        self.sd2 = float(sd2)
        self.box = np.asarray(box, dtype=float)  # (2, 2): [[lo1, hi1], [lo2, hi2]]
        self.dim = 2

    def _in_box(self, thetas):
        return ((thetas >= self.box[:, 0]) & (thetas <= self.box[:, 1])).all(axis=1)

    def log_density(self, thetas):
        thetas = np.atleast_2d(thetas)
        t1, t2 = thetas[:, 0], thetas[:, 1]
        resid = t2 - self.curve(t1)
        val = -0.5 * (t1 / self.sd1) ** 2 - 0.5 * (resid / self.sd2) ** 2
        val = val - math.log(self.sd1) - math.log(self.sd2) - _LOG_2PI
        return np.where(self._in_box(thetas), val, -np.inf)

    def sample(self, gen, n):
        out = np.empty((n, 2))
        filled = 0
        while filled < n:
            m = max(2 * (n - filled), 16)
            t1 = self.sd1 * gen.standard_normal(m)
            t2 = self.curve(t1) + self.sd2 * gen.standard_normal(m)
            cand = np.column_stack([t1, t2])
            cand = cand[self._in_box(cand)]
            take = min(len(cand), n - filled)
            out[filled:filled + take] = cand[:take]
            filled += take
        return out

    def grad_log_density(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not self._in_box(theta[None, :])[0]:
            return np.full(2, np.nan)
        t1, t2 = theta
        h = 1e-6
        dcurve = (self.curve(np.array([t1 + h])) - self.curve(np.array([t1 - h])))[0] / (2 * h)
        resid = t2 - self.curve(np.array([t1]))[0]
        g1 = -t1 / self.sd1**2 + resid / self.sd2**2 * dcurve
        g2 = -resid / self.sd2**2
        return np.array([g1, g2])


# ---------------------------------------------------------------------------
# Discrepancy kernels
# ---------------------------------------------------------------------------

class GaussianKernel:
    """Product Gaussian kernel: K_eps(x, y) = prod_d N(x_d; y_d, eps^2).

    Non-finite simulator output gets weight zero (log weight ``-inf``).
    """

    def __init__(self, eps: float):
        if eps <= 0:
            raise ValueError("kernel bandwidth must be positive")
        self.eps = float(eps)

    def log_weight(self, x, y) -> float:
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if not np.isfinite(x).all():
            return -np.inf
        d = x.size
        r2 = float(((x - y) ** 2).sum())
        return -0.5 * d * (_LOG_2PI + 2.0 * math.log(self.eps)) - r2 / (2.0 * self.eps**2)

    def log_weight_batch(self, xs: np.ndarray, y) -> np.ndarray:
        """(B, d) simulated batch -> (B,) log kernel values."""
        xs = np.asarray(xs, dtype=float)
        if xs.ndim == 1:
            xs = xs[:, None]
        y = np.asarray(y, dtype=float).ravel()
        d = xs.shape[1]
        r2 = ((xs - y) ** 2).sum(axis=1)
        out = -0.5 * d * (_LOG_2PI + 2.0 * math.log(self.eps)) - r2 / (2.0 * self.eps**2)
        bad = ~np.isfinite(xs).all(axis=1)
        if bad.any():
            out = np.where(bad, -np.inf, out)
        return out


class DiscrepancyGaussianKernel:
    """Scalar-discrepancy kernel K_eps(x, y) = N(disc(x, y); 0, eps^2).

    ``discrepancy_batch`` (rows -> vector of discrepancies) is an optional
    vectorized fast path; the default loops.
    """

    def __init__(self, eps: float, discrepancy: Callable[[Any, Any], float],
                 discrepancy_batch: Optional[Callable] = None):
        if eps <= 0:
            raise ValueError("kernel bandwidth must be positive")
        self.eps = float(eps)
        self.discrepancy = discrepancy
        self.discrepancy_batch = discrepancy_batch

    def _from_disc(self, d: np.ndarray) -> np.ndarray:
        out = -0.5 * (_LOG_2PI + 2.0 * math.log(self.eps)) - d * d / (2.0 * self.eps**2)
        return np.where(np.isfinite(d), out, -np.inf)

    def log_weight(self, x, y) -> float:
        x = np.asarray(x, dtype=float)
        if not np.isfinite(x).all():
            return -np.inf
        return float(self._from_disc(np.float64(self.discrepancy(x, y))))

    def log_weight_batch(self, xs, y) -> np.ndarray:
        if self.discrepancy_batch is not None:
            xs = np.asarray(xs, dtype=float)
            d = np.asarray(self.discrepancy_batch(xs, y), dtype=float)
            d = np.where(np.isfinite(xs).all(axis=tuple(range(1, xs.ndim))), d, np.nan)
            return self._from_disc(d)
        return np.array([self.log_weight(x, y) for x in xs])


# ---------------------------------------------------------------------------
# Simulators
# ---------------------------------------------------------------------------

class Simulator:
    """Map (theta, stream) -> synthetic data, deterministic per stream.

    ``simulate_batch`` and ``simulate_crn`` have generic fallbacks; models
    with vectorizable noise override them for speed.
    """

    noise_dim: Optional[int] = None  # normals consumed per run, when fixed
    failures: int = 0  # hard failures (non-finite output) seen so far

    def simulate(self, theta: np.ndarray, stream: SeedStream):
        raise NotImplementedError

    def simulate_gen(self, thetas: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        """(B, p) parameter rows -> stacked outputs, consuming ``gen``."""
        raise NotImplementedError

    def simulate_batch(self, thetas: np.ndarray, stream: SeedStream) -> np.ndarray:
        return self.simulate_gen(np.atleast_2d(thetas), stream.generator())

    def simulate_crn(self, theta: np.ndarray, panel) -> np.ndarray:
        """One output per panel seed, deterministic per (theta, panel)."""
        if self.noise_dim is not None:
            z = panel.noise_matrix(self.noise_dim)
            return self.simulate_with_noise(np.atleast_1d(theta), z)
        return np.stack([np.asarray(self.simulate(theta, s)) for s in panel.streams])

    def simulate_with_noise(self, theta: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """(S, noise_dim) normals -> (S, ...) outputs; only for fixed noise_dim."""
        raise NotImplementedError


class LocationSimulator(Simulator):
    """x = loc_fn(theta) + noise_sd * z, the workhorse of the synthetic zoo."""

    def __init__(self, loc_fn: Callable[[np.ndarray], np.ndarray], noise_sd: float,
                 out_dim: int):
        self.loc_fn = loc_fn
        self.noise_sd = float(noise_sd)
        self.out_dim = int(out_dim)
        self.noise_dim = self.out_dim

    def simulate(self, theta, stream):
        z = stream.generator().standard_normal(self.out_dim)
        return self.loc_fn(np.atleast_1d(np.asarray(theta, dtype=float))) + self.noise_sd * z

    def simulate_gen(self, thetas, gen):
        thetas = np.atleast_2d(thetas)
        z = gen.standard_normal((thetas.shape[0], self.out_dim))
        return self.loc_fn(thetas) + self.noise_sd * z

    def simulate_with_noise(self, theta, noise):
        return self.loc_fn(np.atleast_1d(theta)) + self.noise_sd * noise


# ---------------------------------------------------------------------------
# Target and points
# ---------------------------------------------------------------------------

@dataclass
class ParamPoint:
    """A parameter vector with its simulated data and cached log factors."""

    theta: np.ndarray
    log_prior: float
    sim_data: Any
    log_kernel: float

    @property
    def kernel_value(self) -> float:
        return math.exp(self.log_kernel) if self.log_kernel > -np.inf else 0.0

    @property
    def log_post(self) -> float:
        """log prior + log kernel; -inf when either factor vanishes."""
        if self.log_prior == -np.inf or self.log_kernel == -np.inf:
            return -np.inf
        return self.log_prior + self.log_kernel


@dataclass
class WeightedCandidate:
    """An importance candidate with its unnormalized weight ingredients."""

    point: ParamPoint
    log_weight: float
    proposal_logdensity: float
    aux: Optional[np.ndarray] = None  # padding coords of flow proposals

    @property
    def raw_weight(self) -> float:
        return math.exp(self.log_weight) if self.log_weight > -np.inf else 0.0


@dataclass
class AbcTarget:
    """pi_eps(theta, x | y): prior, simulator, kernel, observed data."""

    prior: Prior
    simulator: Simulator
    kernel: Any
    observed: np.ndarray
    name: str = "custom"
    analytic_grad_loglik: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def dim(self) -> int:
        return self.prior.dim

    def log_prior_one(self, theta) -> float:
        return self.prior.log_density_one(np.asarray(theta, dtype=float))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def simulate(target: AbcTarget, theta: np.ndarray, stream: SeedStream):
    """Draw synthetic data from P_theta; deterministic given the stream."""
    return target.simulator.simulate(np.asarray(theta, dtype=float), stream)


def simulate_batch(target: AbcTarget, thetas: np.ndarray, stream: SeedStream) -> np.ndarray:
    return target.simulator.simulate_batch(np.asarray(thetas, dtype=float), stream)


def log_kernel_weight(target: AbcTarget, sim_data, observed=None) -> float:
    y = target.observed if observed is None else observed
    return float(target.kernel.log_weight(sim_data, y))


def kernel_weight(target: AbcTarget, sim_data, observed=None) -> float:
    """K_eps(x, y) >= 0; zero for non-finite simulator output."""
    lw = log_kernel_weight(target, sim_data, observed)
    return math.exp(lw) if lw > -np.inf else 0.0


def log_unnorm_posterior(target: AbcTarget, point: ParamPoint) -> float:
    """log prior(theta) + log K_eps(x, y); -inf when either factor is zero."""
    return point.log_post


def prior_sample(target: AbcTarget, stream: SeedStream, n: int = 1) -> np.ndarray:
    draws = target.prior.sample(stream.generator(), n)
    return draws[0] if n == 1 else draws


def make_point(target: AbcTarget, theta: np.ndarray, stream: SeedStream) -> ParamPoint:
    """Simulate at theta and assemble a fully populated ParamPoint."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lp = target.log_prior_one(theta)
    x = simulate(target, theta, stream)
    lk = log_kernel_weight(target, x)
    return ParamPoint(theta=theta, log_prior=lp, sim_data=x, log_kernel=lk)
