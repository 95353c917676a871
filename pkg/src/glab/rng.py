"""Deterministic random substreams derived from a single master seed.

Every consumer of randomness in the package names its stream by a path of
labels and integers, e.g. ``SeededRng(seed).stream("perturb", k, t)``.  The
underlying bit generator is Philox, a counter-based generator, so a stream
can be rebuilt from its (seed, path) key at any time and replays the same
values.  Streams with different paths are statistically independent; drawing
from one never advances another.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _path_entry(part: int | str) -> int:
    """Map one path component to a nonnegative 64-bit integer."""
    if isinstance(part, str):
        digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(part) & _MASK64


def derive_seed(master: int, label: str) -> int:
    """A 63-bit seed for an independent consumer named by ``label``.

    Used by the command line front end to fan one global seed out into
    per-subsystem seeds without coupling them.
    """
    payload = int(master).to_bytes(16, "little", signed=True) + label.encode("utf-8")
    digest = hashlib.blake2s(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


class SeededRng:
    """A named, reproducible random stream.

    ``stream(*parts)`` derives an independent child stream.  ``generator()``
    returns a fresh numpy Generator positioned at the start of the stream;
    calling it twice replays identical draws, which is what makes matrix
    construction keyed by (seed, layer, timestep) reproducible.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def stream(self, *parts: int | str) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(parts))

    def generator(self) -> np.random.Generator:
        key = tuple(_path_entry(p) for p in self.path)
        seq = np.random.SeedSequence(entropy=self.seed & _MASK64, spawn_key=key)
        return np.random.Generator(np.random.Philox(seq))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self.path!r})"
