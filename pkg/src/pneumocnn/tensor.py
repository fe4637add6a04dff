"""Dense float32 tensors and the PCG32 generator used for all randomness.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in row-major
(N, C, H, W) order. Reductions are carried out in float64 and rounded back
to float32 on store.
"""
from __future__ import annotations

import functools
import math
from typing import Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float32

_MASK64 = (1 << 64) - 1
_PCG_MULT = 6364136223846793005
_BLOCK = 4096


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"invalid tensor shape {shape}: every dimension must be >= 1")
    return np.full(shape, fill, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for 2-D operands, accumulated at float64 and stored as float32."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
    return out.astype(DTYPE)


@functools.lru_cache(maxsize=64)
def _jump_table(inc: int) -> tuple[np.ndarray, np.ndarray, int, int]:
    # state_k = A_k * state_0 + C_k (mod 2**64), for k = 0.._BLOCK
    mult = np.empty(_BLOCK, dtype=np.uint64)
    add = np.empty(_BLOCK, dtype=np.uint64)
    a, c = 1, 0
    for k in range(_BLOCK):
        mult[k] = a
        add[k] = c
        a = (a * _PCG_MULT) & _MASK64
        c = (c * _PCG_MULT + inc) & _MASK64
    return mult, add, a, c


class PCG32:
    """PCG-XSH-RR 64/32 (O'Neill), seeded as in the reference ``pcg32_srandom``.

    ``seed`` picks the starting state and ``stream`` the increment, so two
    generators with the same seed but different streams are independent.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.inc = ((int(stream) << 1) | 1) & _MASK64
        self.state = 0
        self._step()
        self.state = (self.state + (int(seed) & _MASK64)) & _MASK64
        self._step()

    def _step(self) -> None:
        self.state = (self.state * _PCG_MULT + self.inc) & _MASK64

    @staticmethod
    def _output(old: int) -> int:
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def next_u32(self) -> int:
        old = self.state
        self._step()
        return self._output(old)

    def u32(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as a uint32 array (same sequence as ``next_u32``)."""
        if n < 0:
            raise ValueError("n must be non-negative")
        out = np.empty(n, dtype=np.uint32)
        mult, add, jump_a, jump_c = _jump_table(self.inc)
        pos = 0
        while pos < n:
            m = min(_BLOCK, n - pos)
            old = mult[:m] * np.uint64(self.state) + add[:m]
            xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)).astype(np.uint32)
            rot = (old >> np.uint64(59)).astype(np.uint32)
            out[pos:pos + m] = (xorshifted >> rot) | (xorshifted << ((-rot.astype(np.int64)) & 31).astype(np.uint32))
            if m == _BLOCK:
                self.state = (jump_a * self.state + jump_c) & _MASK64
            else:
                self.state = (int(mult[m - 1]) * self.state + int(add[m - 1])) & _MASK64
                self._step()
            pos += m
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 values in [0, 1) with 32 bits of resolution."""
        return self.u32(n).astype(np.float64) * (1.0 / 4294967296.0)

    def random(self) -> float:
        return self.next_u32() * (1.0 / 4294967296.0)

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws by the Box-Muller transform (two uniforms per pair)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        return z[:n]

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) (rejection sampling as in pcg32_boundedrand)."""
        if bound < 1:
            raise ValueError("bound must be >= 1")
        threshold = ((1 << 32) - bound) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def rng_uniform(rng: PCG32, n: int) -> np.ndarray:
    return rng.uniform(n)
