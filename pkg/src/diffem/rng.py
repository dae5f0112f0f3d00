"""Deterministic derivation of random streams from a single master seed.

Every random draw in the system comes from a stream identified by
(master seed, purpose tag, item index).  The stream seed is the first 8
bytes of blake2b over the string "{master}:{tag}:{index}", so streams are
independent of call order and safe to use concurrently.  There is no global
mutable RNG anywhere in the package.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(master: int, tag: str, index: int = 0) -> int:
    digest = hashlib.blake2b(
        f"{master}:{tag}:{index}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def stream(master: int, tag: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, tag, index))


class RowStreams:
    """Per-row random streams presented with a Generator-like interface.

    ``standard_normal((n, d))`` draws row i from stream i, so each item's
    noise sequence depends only on its own (master, tag, index) identity,
    never on how items are batched together.
    """

    def __init__(self, master: int, tag: str, indices):
        self._gens = [stream(master, tag, i) for i in indices]

    def __len__(self):
        return len(self._gens)

    def standard_normal(self, shape):
        n, *rest = shape
        if n != len(self._gens):
            raise ValueError(
                f"RowStreams holds {len(self._gens)} streams, requested {n} rows"
            )
        out = np.empty(shape, dtype=np.float64)
        for i, gen in enumerate(self._gens):
            out[i] = gen.standard_normal(tuple(rest))
        return out
