"""Streaming mean/variance with exact two-pass moments per fixed-size block.

Values are buffered into blocks of a fixed absolute size. Each full block is
reduced with an exact two-pass computation (mean, then squared deviations)
and merged into the running result in block-index order. Because block
boundaries fall at fixed positions in the value stream, the outcome is
bitwise independent of how callers chunk their input or of any parallelism
upstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BLOCK_SIZE = 8192


class ZeroVarianceError(ValueError):
    """All observed values are identical; a z-score cannot be formed."""


@dataclass(frozen=True)
class Moments:
    count: int
    mean: float
    m2: float  # sum of squared deviations from the mean

    @property
    def variance(self) -> float:
        """Population (divide-by-n) variance."""
        if self.count == 0:
            raise ValueError("variance of an empty population")
        return self.m2 / self.count

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def merge(self, other: "Moments") -> "Moments":
        # Chan et al. pairwise update; exact for the combined population.
        if self.count == 0:
            return other
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return Moments(count=n, mean=mean, m2=m2)


def exact_moments(values) -> Moments:
    """Plain two-pass moments over a whole array (the reference path)."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    n = arr.size
    if n == 0:
        return Moments(0, 0.0, 0.0)
    mean = float(arr.sum() / n)
    m2 = float(np.square(arr - mean).sum())
    return Moments(count=n, mean=mean, m2=m2)


class MomentAccumulator:
    """Accumulates values in stream order, reducing per fixed-size block."""

    def __init__(self, block_size: int = BLOCK_SIZE):
        if block_size <= 0:
            raise ValueError("block_size must be positive")
        self.block_size = block_size
        self._result = Moments(0, 0.0, 0.0)
        self._buffer: list[np.ndarray] = []
        self._buffered = 0

    def add(self, values) -> None:
        arr = np.asarray(values, dtype=np.float64).ravel()
        if arr.size == 0:
            return
        self._buffer.append(arr)
        self._buffered += arr.size
        if self._buffered >= self.block_size:
            self._drain(final=False)

    def _drain(self, final: bool) -> None:
        if not self._buffer:
            return
        pending = np.concatenate(self._buffer) if len(self._buffer) > 1 else self._buffer[0]
        offset = 0
        while pending.size - offset >= self.block_size:
            block = pending[offset : offset + self.block_size]
            self._result = self._result.merge(exact_moments(block))
            offset += self.block_size
        rest = pending[offset:]
        if final and rest.size:
            self._result = self._result.merge(exact_moments(rest))
            self._buffer = []
            self._buffered = 0
        else:
            self._buffer = [rest] if rest.size else []
            self._buffered = int(rest.size)

    def finalize(self) -> Moments:
        self._drain(final=True)
        return self._result
