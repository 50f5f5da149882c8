"""Order-independent random substreams.

Every random draw in the package comes from a generator keyed by a tuple such
as ``(seed, agent, step, "predict")``. The same key always yields the same
stream, no matter in which order agents or realizations are processed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError(f"substream key parts must be non-negative, got {part}")
    return part


def substream(seed: int, *key) -> np.random.Generator:
    """Return a Philox generator for ``(seed, *key)``.

    Key parts may be non-negative integers or strings (hashed with CRC32).
    """
    entropy = [_word(seed)] + [_word(k) for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
