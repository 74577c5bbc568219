"""Dense float64 math shared by the model and trainer.

Vectors and matrices are plain ``numpy.ndarray`` objects (float64, row-major).
Random draws go through :class:`SeededRng`, a thin wrapper around numpy's
PCG64 bit generator so every consumer of randomness is reproducible from one
integer seed.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DTYPE = np.float64


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return x


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"cannot multiply matrix {m.shape} by vector {v.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = m @ v
    return _finite(out, "matvec")


def sigmoid(x):
    """Logistic function, written via tanh so it never overflows."""
    x = np.asarray(x, dtype=DTYPE)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    if z.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


class SeededRng:
    """Deterministic random source backed by PCG64 (O'Neill's PCG XSL RR 128/64).

    Two instances built from the same seed produce identical draw sequences.
    ``spawn`` derives an independent child stream, also deterministic.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "SeededRng":
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(key),))
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def state(self) -> dict:
        return self._gen.bit_generator.state


def sample_categorical(probs, rng: SeededRng, size=None):
    """Draw indices from a discrete distribution by inverting its CDF.

    Returns a single ``int`` when ``size`` is None, else an int64 array.
    """
    p = np.asarray(probs, dtype=DTYPE)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probs must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probs must be non-negative and sum to 1 (sum={p.sum()!r})")
    cdf = np.cumsum(p)
    u = rng.random(size)
    idx = np.searchsorted(cdf, u, side="right")
    # rounding can leave cdf[-1] slightly below u; fall back to the last
    # index with positive mass
    last = int(np.flatnonzero(p)[-1])
    idx = np.minimum(idx, last)
    if size is None:
        return int(idx)
    return idx.astype(np.int64)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad
