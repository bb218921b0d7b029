"""Dense fp64 tensors, a portable seeded RNG, and the finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 with at most four
axes. The helpers here enforce that contract at module boundaries; inside hot
loops the layers operate on the arrays directly.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError

MAX_AXES = 4
_MASK64 = (1 << 64) - 1


def as_tensor(x, allow_nonfinite: bool = False) -> np.ndarray:
    """Copy ``x`` into a C-contiguous fp64 array, validating rank and finiteness."""
    arr = np.array(x, dtype=np.float64, order="C")
    if arr.ndim > MAX_AXES:
        raise ShapeError(f"tensor has {arr.ndim} axes, at most {MAX_AXES} allowed")
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise NumericsError("tensor contains non-finite values")
    return arr


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major flat offset of ``index`` within ``shape``."""
    if len(shape) != len(index):
        raise ShapeError(f"index {tuple(index)} does not match shape {tuple(shape)}")
    offset = 0
    for dim, i in zip(shape, index):
        if not 0 <= i < dim:
            raise ShapeError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
        offset = offset * dim + i
    return offset


def tensor_elementwise(op: str, a, b) -> np.ndarray:
    """Elementwise ``add``/``sub``/``mul``/``scale``/``clamp``.

    Only scalar-with-tensor broadcasting is supported. For ``clamp`` the second
    operand is a bound ``c`` and values are clipped to ``[-c, c]``.
    """
    a = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if op in ("scale", "clamp"):
        if b_arr.ndim != 0:
            raise ShapeError(f"{op} expects a scalar second operand")
        if op == "scale":
            return a * float(b_arr)
        bound = abs(float(b_arr))
        return np.clip(a, -bound, bound)
    if op not in ("add", "sub", "mul"):
        raise ConfigError(f"unknown elementwise op {op!r}")
    if a.ndim and b_arr.ndim and a.shape != b_arr.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b_arr.shape}")
    if op == "add":
        out = a + b_arr
    elif op == "sub":
        out = a - b_arr
    else:
        out = a * b_arr
    return np.asarray(out, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    ``f`` receives a perturbed copy of ``x`` with the same shape.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericsError(f"non-finite function value while probing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator seeded through splitmix64.

    Pure integer arithmetic, so a given seed yields the same stream on every
    platform and numpy version.
    """

    def __init__(self, seed: int):
        sm = int(seed) & _MASK64
        s = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def spawn(self, key: int = 0) -> "Rng":
        """Independent child stream; advances this generator by one draw."""
        return Rng(self.next_u64() ^ ((int(key) * 0xD1B54A32D192ED03) & _MASK64))

    def random(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n)."""
        if n <= 0:
            raise ConfigError("below() needs n >= 1")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            r = self.next_u64()
            if r <= limit:
                return r % n

    def uniform(self, lo: float, hi: float, shape=()) -> np.ndarray:
        if not lo < hi:
            raise ConfigError(f"uniform bounds must satisfy lo < hi, got [{lo}, {hi})")
        n = int(np.prod(shape, dtype=np.int64))
        u = np.fromiter((self.random() for _ in range(n)), dtype=np.float64, count=n)
        out = lo + (hi - lo) * u
        # rounding can land exactly on hi
        out = np.where(out >= hi, np.nextafter(hi, lo), out)
        return out.reshape(shape)

    def normal(self, mu: float, sigma: float, shape=()) -> np.ndarray:
        """Gaussian draws by the Box-Muller transform."""
        if sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {sigma}")
        n = int(np.prod(shape, dtype=np.int64))
        out = np.empty(n + (n & 1), dtype=np.float64)
        for i in range(0, n, 2):
            u1 = 1.0 - self.random()  # (0, 1]
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(2.0 * math.pi * u2)
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        return (mu + sigma * out[:n]).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx, dtype=np.int64)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if not 0 <= k <= n:
            raise ConfigError(f"cannot choose {k} of {n} without replacement")
        idx = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx[:k], dtype=np.int64)


def rng_uniform(rng: Rng, lo: float, hi: float, shape) -> np.ndarray:
    return rng.uniform(lo, hi, shape)


def rng_normal(rng: Rng, mu: float, sigma: float, shape) -> np.ndarray:
    return rng.normal(mu, sigma, shape)
