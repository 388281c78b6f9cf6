"""Expected-squared-jump-distance criteria and sequential hyper-parameter search.

ESJD in several dimensions uses the D-criterion: the p-th root of the
determinant of the mean jump outer-product matrix, which is scale-aware
without needing the stationary covariance.  Dividing by the mean
per-iteration cost (simulator calls by default) gives the unit-cost
version used to rank kernel configurations.

The search itself is a shrinking-box scheme: each round evaluates a
space-filling (good-lattice) design of candidates by short replicated
runs, recentres the box on the best unit-cost ESJD, and contracts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import SeedStream

__all__ = ["EsjdEstimate", "TuneSpace", "TuneDim", "TuneReport",
           "esjd_d", "esjd_1d", "cesjd", "sequential_tune", "lattice_design"]

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ESJD criteria
# ---------------------------------------------------------------------------

def esjd_d(trace: np.ndarray) -> float:
    """D-criterion ESJD: |mean_t (dtheta dtheta^T)|^(1/p).

    Zero for a chain that never moves; for p = 1 this is the mean squared
    jump.  A singular jump-moment matrix (chain confined to a subspace)
    returns 0 with a warning.
    """
    trace = np.atleast_2d(np.asarray(trace, dtype=float))
    if trace.shape[0] < 2 and trace.shape[1] >= 2 and trace.ndim == 2 and trace.shape[0] == 1:
        trace = trace.T
    if trace.shape[0] < 2:
        raise ValueError("need at least two states")
    jumps = np.diff(trace, axis=0)
    p = trace.shape[1]
    if p == 1:
        return float((jumps[:, 0] ** 2).mean())
    m = jumps.T @ jumps / jumps.shape[0]
    sign, logdet = np.linalg.slogdet(m)
    if sign <= 0:
        logger.warning("singular jump-moment matrix; chain stuck in a subspace")
        return 0.0
    return float(math.exp(logdet / p))


def esjd_1d(trace: np.ndarray) -> float:
    """Mean squared jump of a scalar chain (= 2(1 - rho1) Var in stationarity)."""
    trace = np.asarray(trace, dtype=float).ravel()
    if trace.size < 2:
        raise ValueError("need at least two states")
    d = np.diff(trace)
    return float((d * d).mean())


@dataclass
class EsjdEstimate:
    esjd: float
    cost_per_iter: float
    n_iters: int
    dim: int

    @property
    def cesjd(self) -> float:
        return self.esjd / self.cost_per_iter


def cesjd(trace: np.ndarray, cost_per_iter: float) -> EsjdEstimate:
    """Unit-cost ESJD of a trace; cost is mean simulator calls per iteration."""
    if cost_per_iter <= 0:
        raise ValueError("cost per iteration must be positive")
    trace = np.atleast_2d(np.asarray(trace, dtype=float))
    if trace.shape[1] > trace.shape[0] and trace.shape[0] == 1:
        trace = trace.T
    return EsjdEstimate(esjd=esjd_d(trace), cost_per_iter=float(cost_per_iter),
                        n_iters=trace.shape[0], dim=trace.shape[1])


# ---------------------------------------------------------------------------
# Design generation
# ---------------------------------------------------------------------------

def _korobov_vector(n: int, d: int) -> np.ndarray:
    """Generating vector (1, a, a^2, ...) mod n with a picked by a discrepancy proxy."""
    if d == 1:
        return np.array([1])
    best_a, best_score = 1, np.inf
    for a in range(1, n):
        if math.gcd(a, n) != 1:
            continue
        g = np.array([pow(a, k, n) for k in range(d)])
        pts = (np.outer(np.arange(1, n + 1), g) % n) / n
        # wrap-around L2 criterion: small for well-spread lattices
        prod = np.prod(1.5 - np.abs(pts - 0.5) * (1.0 - np.abs(pts - 0.5)) * 6.0, axis=1)
        score = prod.mean()
        if score < best_score:
            best_a, best_score = a, score
    return np.array([pow(best_a, k, n) for k in range(d)])


def lattice_design(n: int, d: int, shift: Optional[np.ndarray] = None) -> np.ndarray:
    """n good-lattice points in [0, 1)^d with an optional Cranley-Patterson shift."""
    g = _korobov_vector(n, d)
    pts = (np.outer(np.arange(1, n + 1), g) % n + 0.5) / n
    if shift is not None:
        pts = (pts + shift) % 1.0
    return pts


# ---------------------------------------------------------------------------
# Tune space and sequential optimization
# ---------------------------------------------------------------------------

@dataclass
class TuneDim:
    name: str
    lower: float
    upper: float
    scale: str = "linear"  # "linear" | "log"
    integer: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)
                and self.lower < self.upper):
            raise ValueError(f"bad bounds for {self.name}: [{self.lower}, {self.upper}]")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.scale == "log" and self.lower <= 0:
            raise ValueError("log-scale dimension needs positive bounds")

    def to_value(self, u: float, lo: float, hi: float) -> float:
        if self.scale == "log":
            v = math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
        else:
            v = lo + u * (hi - lo)
        if self.integer:
            v = max(round(v), math.ceil(self.lower))
        return v


@dataclass
class TuneSpace:
    """Search box, per-round design size, rounds, and contraction factor.

    ``cost_constraint`` of C couples the dimensions named "gamma" and
    "n_batch" through gamma * n_batch + (1 - gamma) = C: designs propose
    gamma, n_batch is derived, rounded to an integer >= 1, and gamma is
    re-solved so the constraint holds exactly after rounding.
    """

    dims: Sequence[TuneDim]
    budget: int = 6
    rounds: int = 3
    shrink: float = 0.5
    cost_constraint: Optional[float] = None

    def __post_init__(self):
        if self.budget < 2:
            raise ValueError("need at least two candidates per round")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must lie in (0, 1)")
        if self.cost_constraint is not None:
            names = [d.name for d in self.dims]
            if "gamma" not in names:
                raise ValueError("cost constraint needs a 'gamma' dimension")


@dataclass
class TuneReport:
    rows: list = field(default_factory=list)  # dicts: round, params, esjd, cost, cesjd
    best: Optional[dict] = None

    def as_csv_rows(self):
        header = ["round"]
        if self.rows:
            header += sorted(self.rows[0]["params"].keys())
        header += ["esjd", "cost", "cesjd"]
        out = [header]
        for r in self.rows:
            out.append([r["round"]] + [r["params"][k] for k in sorted(r["params"])]
                       + [r["esjd"], r["cost"], r["cesjd"]])
        return out


def _apply_constraint(params: dict, c: float) -> dict:
    """Project (gamma, n_batch) onto gamma * n_batch + (1 - gamma) = C exactly."""
    gamma = min(max(params["gamma"], 1e-6), 1.0)
    if c <= 1.0:
        params["gamma"], params["n_batch"] = gamma, 1
        return params
    n_b = max(1, round(1.0 + (c - 1.0) / gamma))
    if n_b == 1:
        n_b = 2  # gamma would need to exceed 1 otherwise
    params["n_batch"] = int(n_b)
    params["gamma"] = (c - 1.0) / (n_b - 1.0)
    return params


def sequential_tune(space: TuneSpace, runner: Callable[[dict, SeedStream], EsjdEstimate],
                    stream: SeedStream) -> tuple[dict, TuneReport]:
    """Shrinking-box search over the tune space.

    ``runner(params, stream)`` performs the short replicated run and returns
    an :class:`EsjdEstimate`; the incumbent maximizes cesjd, ties toward
    lower cost.  Aborts if every evaluation of the first round is zero.
    """
    d = len(space.dims)
    lo = np.array([dim.lower for dim in space.dims], dtype=float)
    hi = np.array([dim.upper for dim in space.dims], dtype=float)
    report = TuneReport()
    incumbent = None

    for rnd in range(space.rounds):
        shift = stream.child(0xDE5, rnd).generator().random(d)
        design = lattice_design(space.budget, d, shift)
        for i, u in enumerate(design):
            params = {dim.name: dim.to_value(u[k], lo[k], hi[k])
                      for k, dim in enumerate(space.dims)}
            if space.cost_constraint is not None:
                params = _apply_constraint(params, space.cost_constraint)
            est = runner(params, stream.child(0xE7A1, rnd, i))
            row = {"round": rnd, "params": dict(params), "esjd": est.esjd,
                   "cost": est.cost_per_iter, "cesjd": est.cesjd}
            report.rows.append(row)
            better = (incumbent is None
                      or row["cesjd"] > incumbent["cesjd"]
                      or (row["cesjd"] == incumbent["cesjd"]
                          and row["cost"] < incumbent["cost"]))
            if better:
                incumbent = row
        if all(row["esjd"] == 0.0 for row in report.rows):
            raise RuntimeError("tuning aborted: the chain never moved anywhere "
                               "in the search space")
        # recentre on the incumbent and contract, staying inside the original box
        centre = np.array([_to_unit(space.dims[k], incumbent["params"][space.dims[k].name],
                                    space.dims[k].lower, space.dims[k].upper)
                           for k in range(d)])
        width = np.array([_unit_width(space.dims[k], lo[k], hi[k]) for k in range(d)])
        new_width = width * space.shrink
        centre = np.clip(centre, 0.0, 1.0)
        lo_u = np.clip(centre - new_width / 2.0, 0.0, 1.0)
        hi_u = np.minimum(lo_u + new_width, 1.0)
        lo_u = np.maximum(hi_u - new_width, 0.0)
        lo = np.array([_from_unit(space.dims[k], lo_u[k]) for k in range(d)])
        hi = np.array([_from_unit(space.dims[k], hi_u[k]) for k in range(d)])

    report.best = incumbent
    return dict(incumbent["params"]), report


def _to_unit(dim: TuneDim, v: float, lo: float, hi: float) -> float:
    if dim.scale == "log":
        return ((math.log(v) - math.log(dim.lower))
                / (math.log(dim.upper) - math.log(dim.lower)))
    return (v - dim.lower) / (dim.upper - dim.lower)


def _unit_width(dim: TuneDim, lo: float, hi: float) -> float:
    if dim.scale == "log":
        return ((math.log(hi) - math.log(lo))
                / (math.log(dim.upper) - math.log(dim.lower)))
    return (hi - lo) / (dim.upper - dim.lower)


def _from_unit(dim: TuneDim, u: float) -> float:
    if dim.scale == "log":
        return math.exp(math.log(dim.lower)
                        + u * (math.log(dim.upper) - math.log(dim.lower)))
    return dim.lower + u * (dim.upper - dim.lower)
