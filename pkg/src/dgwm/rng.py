"""Seeded random sampling."""
from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .tensor import Tensor


class Rng:
    """Deterministic generator: same seed and call sequence give the same draws.

    Thin wrapper over numpy's PCG64 so the seed stays inspectable and the
    generator can be forked into independent child streams.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "Rng":
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.gen = np.random.Generator(np.random.PCG64([self.seed, int(key)]))
        return child

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def random(self, shape=None) -> np.ndarray:
        return self.gen.random(size=shape)

    def state(self) -> dict:
        return self.gen.bit_generator.state


def gaussian(rng: Rng, shape, variance: float) -> Tensor:
    """I.i.d. N(0, variance) samples; variance 0 gives exact zeros and draws nothing."""
    if variance < 0:
        raise ParameterError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return Tensor(np.zeros(shape))
    return Tensor(rng.normal(shape, scale=float(np.sqrt(variance))))
