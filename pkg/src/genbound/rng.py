"""Splittable, reproducible random streams.

All randomness in the library flows through Philox4x64-10, a counter-based
bit generator whose output stream numpy guarantees to be stable across
versions.  Streams are split by key rather than by jumping the counter: the
128-bit Philox key is packed as

    key = (seed, stream_id << 32 | index)

so every (seed, stream_id, index) triple names an independent stream.  This
lets per-step noise, per-sample Monte-Carlo draws and per-epoch shuffles each
own a substream, making results reproducible and independent of evaluation
order or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Stream ids, one per independent consumer of randomness.
STREAM_INIT = 0  # weight initialization
STREAM_BATCH = 1  # mini-batch shuffling / sampling
STREAM_NOISE = 2  # surrogate perturbation noise
STREAM_FLATNESS = 3  # flatness Monte-Carlo draws
STREAM_DATA = 4  # synthetic dataset generation
STREAM_HUTCHINSON = 5  # trace-estimation probes
STREAM_SUBSET = 6  # dataset subsetting

_MASK32 = (1 << 32) - 1
_MASK64 = (1 << 64) - 1


def make_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Return the generator for the (seed, stream, index) substream."""
    if not 0 <= stream <= _MASK32:
        raise ValueError(f"stream id out of range: {stream}")
    if index < 0:
        raise ValueError(f"substream index must be non-negative: {index}")
    key = np.array(
        [seed & _MASK64, ((stream << 32) | (index & _MASK32)) & _MASK64],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class StreamKey:
    """Handle to a family of substreams, split on demand.

    ``key.rng(j)`` yields the same generator no matter how many other
    substreams were consumed before it, so Monte-Carlo loops may be
    parallelized or re-run with a different sample count without
    perturbing earlier draws.
    """

    seed: int
    stream: int

    def rng(self, index: int = 0) -> np.random.Generator:
        return make_rng(self.seed, self.stream, index)
