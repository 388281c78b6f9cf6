"""Deterministic, splittable random streams and common-random-number panels.

Every stochastic component of the library receives randomness through a
:class:`SeedStream`, a cheap immutable value identified by a 64-bit
``(root_seed, stream_id)`` pair.  Calling :meth:`SeedStream.generator`
always returns a fresh numpy ``Generator`` positioned at the start of the
stream, so any function of ``(args, stream)`` is replayable.  Substreams
are derived in O(1) by integer hashing, which keeps batch kernels (one
substream per candidate or per worker) cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "SeedStream",
    "CrnPanel",
    "make_stream",
    "fresh_panel",
    "draw_standard_normal",
]

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    """One splitmix64 scrambling round (pure-int, no numpy overhead)."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix(a: int, b: int) -> int:
    """Combine two 64-bit values into a well-scrambled 64-bit id."""
    return _splitmix64(_splitmix64(a & _MASK64) ^ ((b + _GOLDEN) & _MASK64))


@dataclass(frozen=True)
class SeedStream:
    """Immutable handle for one reproducible random stream.

    The same ``(root_seed, stream_id)`` always maps to the identical
    sequence; distinct ids give streams that are independent for all
    practical purposes (PCG64 seeded through ``SeedSequence`` hashing).
    """

    root_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator at position 0 of this stream."""
        ss = np.random.SeedSequence([self.root_seed & _MASK64, self.stream_id & _MASK64])
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "SeedStream":
        """Derive a substream; distinct key paths give distinct streams."""
        sid = self.stream_id & _MASK64
        for k in keys:
            sid = _mix(sid, int(k))
        return SeedStream(self.root_seed, sid)

    def low_entropy_seed(self) -> int:
        """A scrambled uint64 for simulators with their own counter-based RNG."""
        return _mix(self.root_seed, self.stream_id)


def make_stream(root_seed: int, stream_id: int = 0) -> SeedStream:
    """Create the stream addressed by ``(root_seed, stream_id)``."""
    return SeedStream(int(root_seed), int(stream_id))


@dataclass(frozen=True, eq=False)
class CrnPanel:
    """A fixed panel of S seed streams shared by paired simulator calls.

    Both perturbed evaluations of a central difference must run against the
    same panel so the simulator noise cancels.  The panel is a value: it
    never advances, so reuse across the two sides is safe by construction.

    Simulators consume a panel through one of two equivalent views and must
    pick one consistently:

    * ``streams[s]`` -- a full substream per seed (arbitrary noise demand);
    * ``noise_matrix(n)`` -- one bulk ``(S, n)`` normal draw, row ``s``
      deterministic per seed index ``s`` (fast fixed-shape path).
    """

    base: SeedStream
    n_seeds: int
    _cache: dict = field(default_factory=dict, repr=False)

    @cached_property
    def streams(self) -> tuple[SeedStream, ...]:
        return tuple(self.base.child(1_000_003 + s) for s in range(self.n_seeds))

    def noise_matrix(self, n_per_seed: int) -> np.ndarray:
        """(S, n_per_seed) standard normals, deterministic per panel."""
        got = self._cache.get(n_per_seed)
        if got is None:
            from ._fastrand import normal_matrix
            seed = self.base.child(0xB011D).low_entropy_seed()
            got = normal_matrix(seed, (self.n_seeds, n_per_seed))
            self._cache[n_per_seed] = got
        return got


def fresh_panel(stream: SeedStream, n_seeds: int) -> CrnPanel:
    """Panel of ``n_seeds`` distinct substreams of ``stream``.

    Raises ``ValueError`` for ``n_seeds < 1``.
    """
    if n_seeds < 1:
        raise ValueError(f"panel needs at least one seed, got {n_seeds}")
    return CrnPanel(stream, int(n_seeds))


def draw_standard_normal(stream: SeedStream, n: int) -> np.ndarray:
    """First ``n`` standard normals of ``stream`` (replay gives the same vector)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n == 0:
        return np.empty(0)
    return stream.generator().standard_normal(n)
