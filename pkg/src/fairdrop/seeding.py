"""Named sub-seeds derived from one top-level seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "shuffle", "allocation", "probe")


def derive_seed(seed: int, name: str) -> int:
    """Return a 63-bit seed for stream `name`, stable across processes and platforms."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def split_seeds(seed: int) -> dict[str, int]:
    return {name: derive_seed(seed, name) for name in STREAMS}
