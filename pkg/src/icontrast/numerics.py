"""Dense float64 helpers, a portable SplitMix64 generator, and finite differences.

Arrays throughout the package are plain ``numpy.ndarray`` objects of dtype
float64. Randomness never goes through numpy's global state or its bit
generators: every draw comes from :class:`Rng`, whose output stream is fully
determined by a 64-bit seed.

SplitMix64
----------
The generator keeps one 64-bit word ``state``. Each output is::

    state = state + 0x9E3779B97F4A7C15            (mod 2**64)
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (mod 2**64)
    return z ^ (z >> 31)

Because output ``n`` depends only on ``seed + n * GAMMA``, blocks of outputs are
computed with vectorized uint64 arithmetic and are bit-identical to the scalar
loop. Derived quantities:

* ``uniform``: ``(u >> 11) * 2**-53``, in ``[0, 1)``.
* ``randbelow(n)``: rejection sampling on the raw 64-bit word, ``u % n`` once
  ``u < 2**64 - (2**64 % n)``.
* ``normal``: Box-Muller on two uniforms, ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
* ``derive_seed(base, *parts)``: folds each integer part into the seed with
  ``s = mix(s ^ mix(part + GAMMA))``, which gives independent substreams keyed
  by (base_seed, sample_index, layer_index) and similar tuples.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def derive_seed(base: int, *parts: int) -> int:
    """Combine a base seed with integer labels into an independent stream seed."""
    s = base & MASK64
    for p in parts:
        s = mix64(s ^ mix64((int(p) + GAMMA) & MASK64))
    return s


class Rng:
    """SplitMix64 stream. Single owner; split with :meth:`spawn` instead of sharing."""

    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ValueError("seed must be a non-negative 64-bit integer")
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix64_array(states)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def normal_array(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform_array(2 * ((n + 1) // 2)).reshape(2, -1)
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)`` (Fisher-Yates, top down)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, *parts: int) -> "Rng":
        return Rng(derive_seed(self.state, *parts))


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)


def softmax(v, scale: float = 1.0) -> np.ndarray:
    """Softmax of ``scale * v`` with max subtraction."""
    x = np.asarray(v, dtype=np.float64) * scale
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    e = np.exp(x - x.max())
    return e / e.sum()


def l2_normalize(v) -> np.ndarray:
    x = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(x)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot L2-normalize a zero or non-finite vector")
    return x / n


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``x`` is not modified. Raises ``ValueError`` if ``f`` returns a non-finite value.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||)`` (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def sequential_sum(values: Iterable[np.ndarray]) -> np.ndarray | None:
    """Left-to-right sum; the fixed order keeps reductions bit-reproducible."""
    total = None
    for v in values:
        total = v.copy() if total is None else total + v
    return total
