"""Numba-compiled counter-based normal sampler (splitmix64 + ziggurat).

Shared by the CRN panels (bulk noise matrices keyed by a 64-bit seed) and
the SDE simulators (noise fused into the integration loop).  A fixed seed
maps to a fixed noise sequence with no generator object to construct, which
is what makes per-candidate and per-panel streams cheap.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

__all__ = ["ZIG_X", "ZIG_F", "sm64_next", "zig_normal", "normal_vector",
           "normal_matrix"]


def _build_tables():
    # Marsaglia-Tsang 256-layer ziggurat for the standard normal
    r = 3.6541528853610088
    v = 4.92867323399e-3
    f = lambda x: math.exp(-0.5 * x * x)
    x = np.empty(257)
    x[256] = v / f(r)
    x[255] = r
    for i in range(254, 0, -1):
        x[i] = math.sqrt(-2.0 * math.log(v / x[i + 1] + f(x[i + 1])))
    x[0] = 0.0
    return x, np.array([f(xi) for xi in x])


ZIG_X, ZIG_F = _build_tables()


@njit(inline="always", cache=True)
def sm64_next(s):
    s = (s + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = s
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = z ^ (z >> np.uint64(31))
    return s, z


@njit(inline="always", cache=True)
def zig_normal(s, xt, ft):
    while True:
        s, u = sm64_next(s)
        i = np.int64(u & np.uint64(255))
        sign = 1.0 if (u >> np.uint64(8)) & np.uint64(1) else -1.0
        uf = np.float64(u >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        x = uf * xt[i + 1]
        if x < xt[i]:
            return s, sign * x
        if i == 255:
            while True:  # Marsaglia tail beyond R
                s, z1 = sm64_next(s)
                u1 = (np.float64(z1 >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)
                s, z2 = sm64_next(s)
                u2 = (np.float64(z2 >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)
                xx = -np.log(u1) / 3.6541528853610088
                yy = -np.log(u2)
                if yy + yy > xx * xx:
                    return s, sign * (3.6541528853610088 + xx)
        else:
            s, z3 = sm64_next(s)
            u3 = np.float64(z3 >> np.uint64(11)) * (1.0 / 9007199254740992.0)
            if ft[i + 1] + u3 * (ft[i] - ft[i + 1]) < np.exp(-0.5 * x * x):
                return s, sign * x


@njit(cache=True)
def _normal_fill(seed, out, xt, ft):
    s = np.uint64(seed)
    for k in range(out.size):
        s, z = zig_normal(s, xt, ft)
        out[k] = z
    return out


def normal_vector(seed: int, n: int) -> np.ndarray:
    """n standard normals, a pure function of the 64-bit seed."""
    return _normal_fill(np.uint64(seed), np.empty(n), ZIG_X, ZIG_F)


def normal_matrix(seed: int, shape) -> np.ndarray:
    out = np.empty(int(np.prod(shape)))
    _normal_fill(np.uint64(seed), out, ZIG_X, ZIG_F)
    return out.reshape(shape)
