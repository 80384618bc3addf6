"""Named, reproducible random substreams derived from one 64-bit seed."""

from __future__ import annotations

import zlib

import numpy as np

# stable label -> stream id; crc32 is deterministic across processes/platforms
def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for (seed, label); same pair -> same stream."""
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key]))
