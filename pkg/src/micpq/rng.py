"""Deterministic random streams.

All randomness in the package flows from 64-bit seeds through the Philox
counter-based generator (Philox4x64, as implemented by numpy).  Independent
streams are obtained by putting the seed in the first key word and a
``(stream_id, step)`` pair in the second, so any (seed, stream, step)
triple names a reproducible generator without risk of overlap.  The same
construction can be reproduced in any language with a Philox4x64
implementation.
"""
from __future__ import annotations

import numpy as np

_MASK32 = 0xFFFFFFFF
_MASK64 = 0xFFFFFFFFFFFFFFFF

# Stream ids used by the trainer; anything < 16 is reserved for the package.
STREAM_ENCODER_INIT = 1
STREAM_CODEBOOK_INIT = 2
STREAM_SHUFFLE = 3
STREAM_STEP = 4
STREAM_SPLIT = 5


def spawn(seed: int, stream: int = 0, step: int = 0) -> np.random.Generator:
    """Return the generator named by (seed, stream, step)."""
    key = np.array(
        [seed & _MASK64, ((stream & _MASK32) << 32) | (step & _MASK32)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, stream: int, step: int = 0) -> int:
    """Derive a fresh 64-bit sub-seed from (seed, stream, step)."""
    return int.from_bytes(spawn(seed, stream, step).bytes(8), "little")
