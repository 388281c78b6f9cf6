"""Shared test fixtures: a fully enumerable discrete ABC model.

Three parameter atoms x three data atoms, categorical simulator, positive
kernel values: every distribution the samplers should target can be
computed exactly, including the full i-SIR transition matrix.
"""

import itertools
import math
from math import factorial

import numpy as np

from glabc.kernels import IndependentProposal
from glabc.model import AbcTarget, Prior, Simulator

ATOMS = np.array([0.0, 1.0, 2.0])


class DiscretePrior(Prior):
    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)
        self.dim = 1

    def log_density(self, thetas):
        idx = np.rint(np.atleast_2d(thetas)[:, 0]).astype(int)
        return np.log(self.probs[idx])

    def sample(self, gen, n):
        return ATOMS[gen.choice(3, size=n, p=self.probs)][:, None]


class DiscreteSim(Simulator):
    def __init__(self, cond):
        self.cond = np.asarray(cond, dtype=float)  # cond[theta, x]

    def simulate(self, theta, stream):
        gen = stream.generator()
        t = int(round(float(np.atleast_1d(theta)[0])))
        return ATOMS[gen.choice(3, p=self.cond[t])]

    def simulate_gen(self, thetas, gen):
        t = np.rint(np.atleast_2d(thetas)[:, 0]).astype(int)
        u = gen.random(len(t))
        cum = np.cumsum(self.cond[t], axis=1)
        x = (u[:, None] > cum).sum(axis=1)
        return ATOMS[x][:, None]


class DiscreteKernel:
    def __init__(self, kvals):
        self.kvals = np.asarray(kvals, dtype=float)  # K(x_atom, y)
        self.eps = 1.0

    def log_weight(self, x, y):
        return math.log(self.kvals[int(round(float(np.ravel(x)[0])))])

    def log_weight_batch(self, xs, y):
        idx = np.rint(np.atleast_2d(xs)[:, 0]).astype(int)
        return np.log(self.kvals[idx])


class DiscreteProposal(IndependentProposal):
    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float)
        self.dim = 1

    def sample_batch(self, gen, n):
        idx = gen.choice(3, size=n, p=self.probs)
        return ATOMS[idx][:, None], None, np.log(self.probs[idx])

    def log_density(self, thetas, aux=None):
        idx = np.rint(np.atleast_2d(thetas)[:, 0]).astype(int)
        return np.log(self.probs[idx])


PRIOR_P = np.array([0.5, 0.3, 0.2])
COND = np.array([[0.7, 0.2, 0.1], [0.2, 0.6, 0.2], [0.1, 0.3, 0.6]])
KVALS = np.array([1.0, 0.55, 0.25])
QPROBS = np.array([0.25, 0.5, 0.25])


def toy_target() -> AbcTarget:
    return AbcTarget(prior=DiscretePrior(PRIOR_P), simulator=DiscreteSim(COND),
                     kernel=DiscreteKernel(KVALS), observed=np.zeros(1), name="toy3")


def toy_proposal() -> DiscreteProposal:
    return DiscreteProposal(QPROBS)


def exact_joint_posterior() -> np.ndarray:
    """pi_eps over the 9 (theta, x) atoms, exactly normalized."""
    joint = PRIOR_P[:, None] * COND * KVALS[None, :]
    return joint / joint.sum()


def joint_index(state) -> int:
    t = int(round(float(state.point.theta[0])))
    x = int(round(float(np.ravel(state.point.sim_data)[0])))
    return 3 * t + x


def exact_isir_transition(n_batch: int) -> np.ndarray:
    """Brute-force i-SIR transition matrix over the 9 joint atoms.

    Enumerates candidate multisets with multinomial probabilities; each
    multiset contributes its selection distribution over (current state +
    fresh candidates) proportional to the importance weights.
    """
    lam = (QPROBS[:, None] * COND).ravel()
    w = (PRIOR_P[:, None] * KVALS[None, :] / QPROBS[:, None]).ravel()
    P = np.zeros((9, 9))
    for counts in itertools.product(range(n_batch + 1), repeat=8):
        s = sum(counts)
        if s > n_batch:
            continue
        c = np.array(list(counts) + [n_batch - s])
        log_mult = (math.log(factorial(n_batch))
                    - sum(math.log(factorial(int(k))) for k in c)
                    + float(c @ np.log(lam)))
        prob_tuple = math.exp(log_mult)
        wsum = float(c @ w)
        for z0 in range(9):
            denom = w[z0] + wsum
            P[z0, z0] += prob_tuple * w[z0] / denom
            P[z0] += prob_tuple * c * w / denom
    return P
