"""Deterministic RNG substreams.

Every stochastic choice in the package draws from a substream addressed by
(base_seed, path of words).  Substreams are independent of evaluation order,
so parallel and serial runs consume identical randomness per unit of work.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(part: int | str) -> int:
    # Strings hash through crc32 so paths stay platform-stable.
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def substream(base_seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the substream addressed by `path` under `base_seed`."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(_word(p) for p in path))
    return np.random.default_rng(ss)


def substream_seed(base_seed: int, *path: int | str) -> int:
    """A 63-bit integer seed derived from the same addressing scheme.

    Used where an API wants a plain seed (e.g. per-instance init seeds that
    get recorded in reports) rather than a Generator.
    """
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(_word(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
