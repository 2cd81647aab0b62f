"""Seeded, reproducible randomness.

The generator is a counter-based splitmix64 recurrence, written out here so
draws are bit-identical across platforms and numpy versions:

    x_i = mix64(base + GAMMA * i),   i = 1, 2, 3, ...

where ``base = mix64(seed)``, GAMMA is the 64-bit golden-ratio increment
0x9E3779B97F4A7C15, and ``mix64`` is the splitmix64 finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

all in wrapping 64-bit arithmetic. A stream owns a monotonically advancing
counter ``i``; vector draws consume a contiguous counter block, so the draw
sequence depends only on the seed and the sequence of draw calls.

Streams are single-owner. Parallel or per-purpose randomness goes through
``fork``, which derives an independent child stream from the parent's base
and a string tag (FNV-1a hashed), without touching the parent's counter.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15

_U64_GAMMA = np.uint64(_GAMMA)
_U64_C1 = np.uint64(0xBF58476D1CE4E5B9)
_U64_C2 = np.uint64(0x94D049BB133111EB)

# 2^-53, spacing of uniform doubles built from the top 53 output bits
_UNIT = 2.0 ** -53


def mix64(z: int) -> int:
    """splitmix64 finalizer on a Python int, wrapping at 64 bits."""
    z &= _MASK64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash, used only for stable fork-tag derivation."""
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _U64_C1
    z = z ^ (z >> np.uint64(27))
    z = z * _U64_C2
    return z ^ (z >> np.uint64(31))


class RngStream:
    """One reproducible draw sequence, fully determined by its seed."""

    def __init__(self, seed: int):
        self._base = mix64(int(seed))
        self._counter = 0

    @property
    def seed_base(self) -> int:
        return self._base

    def fork(self, tag: str | int) -> "RngStream":
        """Derive an independent child stream keyed by (this stream, tag).

        Pure derivation: the parent's counter does not move, and the same
        tag always yields the same child.
        """
        if isinstance(tag, int):
            key = mix64(tag)
        else:
            key = fnv1a64(str(tag).encode("utf-8"))
        child = RngStream.__new__(RngStream)
        child._base = mix64(self._base ^ mix64(key ^ _GAMMA))
        child._counter = 0
        return child

    def _raw(self, n: int) -> np.ndarray:
        """Next ``n`` 64-bit outputs as a uint64 array; advances the counter."""
        start = self._counter + 1
        idx = np.arange(start, start + n, dtype=np.uint64)
        words = _mix_array(np.uint64(self._base) + idx * _U64_GAMMA)
        self._counter += n
        return words

    def uniform(self, shape: tuple[int, ...] | int) -> np.ndarray:
        """Uniform float64 matrix on [0, 1)."""
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _UNIT
        return u.reshape(shape)

    def normal(self, shape: tuple[int, ...] | int) -> np.ndarray:
        """Standard normal float64 matrix via Box-Muller.

        Consumes counter values in pairs; an odd request still burns the
        full pair so the stream stays call-sequence deterministic.
        """
        shape = _as_shape(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        w = self._raw(2 * pairs)
        # u1 in (0, 1] so the log is finite
        u1 = ((w[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _UNIT
        u2 = (w[pairs:] >> np.uint64(11)).astype(np.float64) * _UNIT
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * math.pi * u2)
        out[1::2] = r * np.sin(2.0 * math.pi * u2)
        return out[:n].reshape(shape)

    def bernoulli(self, p, shape: tuple[int, ...] | int) -> np.ndarray:
        """0/1 float64 matrix; ``p`` is a scalar or array broadcastable to shape."""
        p = np.asarray(p, dtype=np.float64)
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ContractViolation(f"bernoulli p outside [0, 1]: {p!r}")
        u = self.uniform(_as_shape(shape))
        return (u < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (argsort of uniforms)."""
        return np.argsort(self.uniform((n,)), kind="stable")

    def integers(self, n: int, upper: int) -> np.ndarray:
        """``n`` ints in [0, upper) by scaling uniforms (upper << 2^53)."""
        if upper <= 0:
            raise ContractViolation("upper must be positive")
        return np.minimum((self.uniform((n,)) * upper).astype(np.int64), upper - 1)


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ContractViolation(f"negative dimension in shape {shape}")
    return shape
