"""Seeded random streams.

Every stream is a numpy ``Generator`` over the PCG64 bit generator, keyed by
a ``SeedSequence`` built from the experiment seed plus a tuple of integer
keys (layer index, replicate index, ...). Streams with different keys are
statistically independent, so work can be split across tensors, replicates
or processes without changing any result.

Gaussian variates come from the Box-Muller transform applied to PCG64
uniform doubles rather than numpy's ziggurat sampler, so that the moment
behaviour is easy to replicate with any PCG64 implementation.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "PCG64+SeedSequence/Box-Muller"


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def normal(rng: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    """N(0, scale^2) samples via Box-Muller."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    size = int(np.prod(shape, dtype=np.int64))
    half = (size + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps log finite
    u2 = rng.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:size]
    return (scale * z).reshape(shape)


def derive(seed: int, *keys: int) -> int:
    """A 63-bit integer seed derived from ``(seed, *keys)``.

    Used to hand a child seed to code that takes a plain integer, such as
    :func:`amup.init.initialize`.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)]
    state = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
    return int(state) >> 1
