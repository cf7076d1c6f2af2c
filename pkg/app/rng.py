from __future__ import annotations

from typing import Iterator, Tuple

import numpy as np

from app.errors import ValidationError

# Recorded in every report next to the seed.
RNG_ALGORITHM = "numpy.random.Philox keyed by SeedSequence([seed, block])"

# Samples drawn from one keyed stream. Sample i always comes from block i // SAMPLE_BLOCK,
# so serial and parallel sweeps see the same draws.
SAMPLE_BLOCK = 1024

# Stream keys for non-sampling uses; sample blocks use nonnegative keys.
KERNEL_STREAM = 2**32 - 1


def check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ValidationError(f"must be an unsigned 64-bit integer, got {seed!r}", field="seed")
    return seed


def stream(seed: int, key: int) -> np.random.Generator:
    """Independent counter-based generator for (seed, key)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([check_seed(seed), key])))


def block_generator(seed: int, block: int) -> np.random.Generator:
    return stream(seed, block)


def kernel_generator(seed: int, index: int = 0) -> np.random.Generator:
    """Stream for random test kernels; disjoint from the sampling blocks."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([check_seed(seed), KERNEL_STREAM, index]))
    )


def blocks(count: int) -> Iterator[Tuple[int, int, int]]:
    """(block, start, stop) covering sample indices 0..count-1."""
    for block, start in enumerate(range(0, count, SAMPLE_BLOCK)):
        yield block, start, min(start + SAMPLE_BLOCK, count)
