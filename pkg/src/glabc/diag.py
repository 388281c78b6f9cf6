"""Diagnostics and ground-truth machinery.

Covers effective sample size (Geyer initial-positive truncation), binned
Gaussian kernel density estimates on fixed grids, the grid-averaged KL
divergence against a reference density (with the interval-length factor for
1-d marginals), importance-sampling reference construction, and mode-switch
counting for multimodal traces.

References persist as a small self-describing flat file: a JSON header line
(kind, boxes, shape, provenance) followed by row-major float64
little-endian density values.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .model import AbcTarget
from .rng import SeedStream

__all__ = [
    "KdeSpec",
    "ReferencePosterior",
    "ess",
    "kde_1d",
    "kde_2d",
    "grid_kl",
    "grid_kl_marginals",
    "reference_by_is",
    "reference_marginals_from_samples",
    "mode_switches",
    "normal_reference_bandwidth",
]

logger = logging.getLogger(__name__)

KL_FLOOR = 1e-12
_MAGIC = "GLABCREF1"


# ---------------------------------------------------------------------------
# Effective sample size
# ---------------------------------------------------------------------------

def ess(trace: np.ndarray) -> float:
    """N / (1 + 2 sum rho_k), autocorrelations truncated at the first
    negative consecutive pair (Geyer initial-positive rule).

    A zero-variance trace has ESS 1 by convention.
    """
    x = np.asarray(trace, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ValueError("need at least 10 samples for an ESS estimate")
    x = x - x.mean()
    var = float(x @ x) / n
    if var == 0.0:
        return 1.0
    # FFT autocovariance, biased normalization (standard for ESS)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    rho = acov / acov[0]
    s = 0.0
    k = 1
    while k + 1 < n:
        pair = rho[k] + rho[k + 1]
        if pair < 0.0:
            break
        s += pair
        k += 2
    out = n / (1.0 + 2.0 * s)
    return float(min(max(out, 1e-12), n))


# ---------------------------------------------------------------------------
# Kernel density estimation on grids
# ---------------------------------------------------------------------------

def normal_reference_bandwidth(samples: np.ndarray) -> float:
    """1.06 sigma-hat n^(-1/5), the normal-reference rule per dimension."""
    samples = np.asarray(samples, dtype=float).ravel()
    sd = samples.std()
    if sd == 0.0:
        sd = 1e-8
    return 1.06 * sd * samples.size ** (-0.2)


@dataclass
class KdeSpec:
    """Bandwidths, grid shape, and box; bandwidth None = normal-reference rule."""

    box: np.ndarray  # (p, 2)
    grid_shape: tuple
    bandwidth: Optional[Sequence[float]] = None

    def __post_init__(self):
        self.box = np.atleast_2d(np.asarray(self.box, dtype=float))
        if isinstance(self.grid_shape, int):
            self.grid_shape = (self.grid_shape,)
        self.grid_shape = tuple(int(g) for g in self.grid_shape)
        if any(g < 2 for g in self.grid_shape):
            raise ValueError("grid needs at least 2 points per dimension")
        if self.bandwidth is not None:
            bw = np.asarray(self.bandwidth, dtype=float)
            if (bw <= 0).any():
                raise ValueError("bandwidths must be positive")

    def axes(self):
        return [np.linspace(self.box[d, 0], self.box[d, 1], self.grid_shape[d])
                for d in range(len(self.grid_shape))]


def _binned_kde(samples: np.ndarray, spec: KdeSpec) -> np.ndarray:
    """Histogram on the grid, Gaussian blur in cell units, renormalize."""
    p = len(spec.grid_shape)
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    inside = ((samples >= spec.box[:, 0]) & (samples <= spec.box[:, 1])).all(axis=1)
    if not inside.any():
        raise ValueError("all samples fall outside the KDE box")
    pts = samples[inside]
    axes = spec.axes()
    steps = np.array([ax[1] - ax[0] for ax in axes])
    edges = [np.linspace(spec.box[d, 0] - steps[d] / 2, spec.box[d, 1] + steps[d] / 2,
                         spec.grid_shape[d] + 1) for d in range(p)]
    hist, _ = np.histogramdd(pts, bins=edges)
    if spec.bandwidth is None:
        bw = np.array([normal_reference_bandwidth(pts[:, d]) for d in range(p)])
    else:
        bw = np.broadcast_to(np.asarray(spec.bandwidth, dtype=float), (p,))
    sigma_cells = bw / steps
    if p == 1:
        dens = gaussian_filter1d(hist, sigma_cells[0], mode="constant", truncate=6.0)
    else:
        dens = gaussian_filter(hist, sigma_cells, mode="constant", truncate=6.0)
    cell = float(np.prod(steps))
    total = dens.sum() * cell
    if total <= 0:
        raise ValueError("empty density after binning")
    return dens / total


def kde_1d(samples: np.ndarray, spec: KdeSpec) -> np.ndarray:
    if len(spec.grid_shape) != 1:
        raise ValueError("kde_1d needs a one-dimensional spec")
    return _binned_kde(samples, spec)


def kde_2d(samples: np.ndarray, spec: KdeSpec) -> np.ndarray:
    """Binned Gaussian product-kernel density, normalized over the box."""
    if len(spec.grid_shape) != 2:
        raise ValueError("kde_2d needs a two-dimensional spec")
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 100:
        raise ValueError("kde_2d wants at least 100 samples")
    return _binned_kde(samples, spec)


# ---------------------------------------------------------------------------
# Reference posteriors and grid KL
# ---------------------------------------------------------------------------

@dataclass
class ReferencePosterior:
    """Normalized density values on a fixed lattice (joint or per-marginal).

    kind "joint": ``density`` is an ndarray over the full grid.
    kind "marginals": ``density`` is a list of 1-d arrays, one per parameter.
    """

    kind: str
    box: np.ndarray          # (p, 2)
    grid_shape: tuple
    density: object          # ndarray | list[ndarray]
    provenance: str = ""

    def __post_init__(self):
        self.box = np.atleast_2d(np.asarray(self.box, dtype=float))
        self.grid_shape = tuple(int(g) for g in self.grid_shape)
        if self.kind not in ("joint", "marginals"):
            raise ValueError(f"unknown reference kind {self.kind!r}")

    def cell_volume(self) -> float:
        steps = [(self.box[d, 1] - self.box[d, 0]) / (self.grid_shape[d] - 1)
                 for d in range(len(self.grid_shape))]
        return float(np.prod(steps))

    def validate(self, tol: float = 1e-6) -> None:
        if self.kind == "joint":
            mass = float(np.asarray(self.density).sum() * self.cell_volume())
            if abs(mass - 1.0) > tol:
                raise ValueError(f"joint reference mass {mass} != 1")
        else:
            for d, dens in enumerate(self.density):
                step = (self.box[d, 1] - self.box[d, 0]) / (self.grid_shape[d] - 1)
                mass = float(np.asarray(dens).sum() * step)
                if abs(mass - 1.0) > tol:
                    raise ValueError(f"marginal {d} mass {mass} != 1")

    def moments(self):
        """Mean and variance per dimension, from the gridded density."""
        means, variances = [], []
        if self.kind == "joint":
            axes = [np.linspace(self.box[d, 0], self.box[d, 1], self.grid_shape[d])
                    for d in range(len(self.grid_shape))]
            dens = np.asarray(self.density)
            cell = self.cell_volume()
            for d in range(len(axes)):
                other = tuple(i for i in range(dens.ndim) if i != d)
                marg = dens.sum(axis=other) * cell / (
                    (self.box[d, 1] - self.box[d, 0]) / (self.grid_shape[d] - 1))
                step = (self.box[d, 1] - self.box[d, 0]) / (self.grid_shape[d] - 1)
                m = float((axes[d] * marg).sum() * step)
                v = float(((axes[d] - m) ** 2 * marg).sum() * step)
                means.append(m)
                variances.append(v)
        else:
            for d, dens in enumerate(self.density):
                ax = np.linspace(self.box[d, 0], self.box[d, 1], self.grid_shape[d])
                step = ax[1] - ax[0]
                m = float((ax * dens).sum() * step)
                v = float(((ax - m) ** 2 * dens).sum() * step)
                means.append(m)
                variances.append(v)
        return np.array(means), np.array(variances)

    # -- flat-file persistence -------------------------------------------

    def save(self, path: str) -> None:
        header = {
            "magic": _MAGIC,
            "kind": self.kind,
            "box": self.box.tolist(),
            "grid_shape": list(self.grid_shape),
            "provenance": self.provenance,
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode("utf-8"))
            if self.kind == "joint":
                fh.write(np.ascontiguousarray(self.density, dtype="<f8").tobytes())
            else:
                for dens in self.density:
                    fh.write(np.ascontiguousarray(dens, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "ReferencePosterior":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            if header.get("magic") != _MAGIC:
                raise ValueError(f"{path} is not a reference file")
            shape = tuple(header["grid_shape"])
            if header["kind"] == "joint":
                payload = np.frombuffer(fh.read(), dtype="<f8").reshape(shape)
                density = payload.copy()
            else:
                density = []
                for npts in shape:
                    density.append(np.frombuffer(fh.read(8 * npts), dtype="<f8").copy())
        return cls(kind=header["kind"], box=np.array(header["box"]),
                   grid_shape=shape, density=density,
                   provenance=header.get("provenance", ""))


def grid_kl(reference: ReferencePosterior, estimate: np.ndarray) -> float:
    """Grid-averaged KL: mean over grid points of pi log(pi / pi-hat).

    The estimate is floored at 1e-12 before the log, so a reference-mass
    region the estimate missed contributes a large finite penalty.  For a
    1-d reference the interval length multiplies the average.
    """
    if reference.kind != "joint":
        raise ValueError("grid_kl expects a joint reference; "
                         "use grid_kl_marginals for per-marginal references")
    ref = np.asarray(reference.density, dtype=float)
    est = np.asarray(estimate, dtype=float)
    if ref.shape != est.shape:
        raise ValueError(f"grid mismatch: {ref.shape} vs {est.shape}")
    est = np.maximum(est, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(ref > 0, ref * np.log(np.maximum(ref, KL_FLOOR) / est), 0.0)
    val = float(terms.mean())
    if ref.ndim == 1:
        val *= float(reference.box[0, 1] - reference.box[0, 0])
    return val


def grid_kl_marginals(reference: ReferencePosterior, estimates) -> np.ndarray:
    """Per-marginal KL values, each scaled by its interval length l_i."""
    if reference.kind != "marginals":
        raise ValueError("need a per-marginal reference")
    out = []
    for d, ref in enumerate(reference.density):
        est = np.maximum(np.asarray(estimates[d], dtype=float), KL_FLOOR)
        if est.shape != ref.shape:
            raise ValueError(f"grid mismatch on marginal {d}")
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(ref > 0, ref * np.log(np.maximum(ref, KL_FLOOR) / est), 0.0)
        l_i = float(reference.box[d, 1] - reference.box[d, 0])
        out.append(l_i * float(terms.mean()))
    return np.array(out)


# ---------------------------------------------------------------------------
# Reference construction
# ---------------------------------------------------------------------------

def reference_by_is(target: AbcTarget, n_prior: int, n_keep: int, spec: KdeSpec,
                    stream: SeedStream, chunk: int = 200_000) -> ReferencePosterior:
    """Importance-sampling reference: prior draws weighted by the kernel.

    Prior samples are simulated in chunks, weighted by K_eps, resampled
    with replacement down to ``n_keep``, then smoothed on the spec grid.
    Warns when the weight effective sample size drops below 100.
    """
    if n_prior < n_keep:
        raise ValueError("n_prior must be >= n_keep")
    gen = stream.generator()
    thetas = np.empty((n_prior, target.dim))
    log_w = np.empty(n_prior)
    done = 0
    while done < n_prior:
        m = min(chunk, n_prior - done)
        t = target.prior.sample(gen, m)
        xs = target.simulator.simulate_gen(t, gen)
        log_w[done:done + m] = target.kernel.log_weight_batch(xs, target.observed)
        thetas[done:done + m] = t
        done += m
    mx = log_w.max()
    if mx == -np.inf:
        logger.warning("reference_by_is: every prior draw got zero weight; "
                       "falling back to uniform resampling")
        w = np.full(n_prior, 1.0 / n_prior)
        ess_w = 0.0
    else:
        w = np.exp(log_w - mx)
        tot = w.sum()
        ess_w = tot * tot / float(w @ w)
        w /= tot
    if ess_w < 100:
        logger.warning("reference_by_is: weight ESS %.1f < 100; reference unreliable",
                       ess_w)
    idx = gen.choice(n_prior, size=n_keep, replace=True, p=w)
    kept = thetas[idx]
    p = len(spec.grid_shape)
    dens = kde_1d(kept[:, 0], spec) if p == 1 else _binned_kde(kept, spec)
    ref = ReferencePosterior(
        kind="joint", box=spec.box, grid_shape=spec.grid_shape, density=dens,
        provenance=(f"importance sampling: model={target.name} n_prior={n_prior} "
                    f"n_keep={n_keep} weight_ess={ess_w:.1f}"))
    ref.validate(1e-6)
    return ref


def reference_marginals_from_samples(samples: np.ndarray, boxes: np.ndarray,
                                     n_grid: int = 512,
                                     provenance: str = "") -> ReferencePosterior:
    """Per-marginal KDE reference from posterior samples (long-run style)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    p = samples.shape[1]
    boxes = np.atleast_2d(np.asarray(boxes, dtype=float))
    density = []
    for d in range(p):
        spec = KdeSpec(box=boxes[d:d + 1], grid_shape=(n_grid,))
        density.append(kde_1d(samples[:, d], spec))
    return ReferencePosterior(kind="marginals", box=boxes,
                              grid_shape=tuple([n_grid] * p), density=density,
                              provenance=provenance)


# ---------------------------------------------------------------------------
# Mode bookkeeping
# ---------------------------------------------------------------------------

def mode_switches(trace: np.ndarray, mode_centers: np.ndarray, radius: float) -> int:
    """Count label changes of the nearest-center-within-radius labeling.

    States farther than ``radius`` from every center keep the previous
    label; leading unlabeled states are skipped.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    trace = np.atleast_2d(np.asarray(trace, dtype=float))
    centers = np.atleast_2d(np.asarray(mode_centers, dtype=float))
    if trace.shape[1] != centers.shape[1]:
        raise ValueError("trace and centers disagree on dimension")
    d2 = ((trace[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    within = d2[np.arange(len(trace)), nearest] <= radius * radius
    switches = 0
    label = -1
    for t in range(len(trace)):
        if within[t]:
            if label >= 0 and nearest[t] != label:
                switches += 1
            label = int(nearest[t])
    return switches
