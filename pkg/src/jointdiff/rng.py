"""Named random substreams derived from a single run seed.

Every component draws from its own substream (``data``, ``init``, ``noise.x``,
``tsteps.y``, ...) so that adding or removing one consumer never perturbs the
draws seen by another. A substream seed is a pure function of (seed, name).
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def substream_seed(seed: int, name: str) -> int:
    """64-bit seed for the named substream, stable across platforms."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def numpy_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


def torch_stream(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    # manual_seed takes a signed 64-bit value
    gen.manual_seed(substream_seed(seed, name) & 0x7FFF_FFFF_FFFF_FFFF)
    return gen
