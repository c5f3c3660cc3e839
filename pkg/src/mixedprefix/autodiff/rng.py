from __future__ import annotations

import hashlib

import numpy as np

_U64 = (1 << 64) - 1


class RngStream:
    """
    Named random stream. Two streams with equal (seed, label) yield identical
    sequences, independent of any other stream in the process.
    """

    def __init__(self, seed: int, label: str = ""):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed) & _U64
        self.label = label
        self.counter = 0
        label_words = np.frombuffer(hashlib.sha256(label.encode("utf-8")).digest()[:16], dtype="<u4")
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *(int(w) for w in label_words)]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r}, counter={self.counter})"

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}" if self.label else label)

    def _tick(self) -> np.random.Generator:
        self.counter += 1
        return self._gen

    def uniform(self, size=None) -> np.ndarray:
        return self._tick().random(size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._tick().normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._tick().integers(low, high, size)

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return self._tick().random(size) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._tick().permutation(n)

    def categorical(self, probs: np.ndarray) -> int:
        # Inverse-CDF draw; one uniform per call keeps the counter meaningful.
        cdf = np.cumsum(probs)
        u = self._tick().random() * cdf[-1]
        return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))

    def geometric(self, p: float) -> int:
        return int(self._tick().geometric(p))
