"""Small dense-math helpers shared by the recurrent core and the trackers.

Vectors and matrices are plain float64 numpy arrays. Everything here is a pure
function; nothing mutates its inputs.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import expit

RNG_ALGORITHM = "PCG64"


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


def as_vector(values) -> np.ndarray:
    v = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.array(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise ShapeError(f"expected matrix {rows}x{cols}, got {m.shape[0]}x{m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def sigmoid(x):
    """Logistic function on scalars or arrays.

    ``scipy.special.expit`` never overflows: it saturates to 0 or 1 instead.
    """
    out = expit(np.asarray(x, dtype=np.float64))
    if out.ndim == 0:
        return float(out)
    return out


def tanh_phi(x):
    """Hyperbolic tangent (the cell squashing nonlinearity)."""
    out = np.tanh(np.asarray(x, dtype=np.float64))
    if out.ndim == 0:
        return float(out)
    return out


def affine(M: np.ndarray, v: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``M @ v + b`` after checking that the shapes agree."""
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if M.ndim != 2 or v.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"affine expects matrix/vector/vector, got {M.shape}, {v.shape}, {b.shape}")
    if M.shape[1] != v.shape[0] or M.shape[0] != b.shape[0]:
        raise ShapeError(
            f"affine shape mismatch: matrix {M.shape[0]}x{M.shape[1]}, "
            f"vector length {v.shape[0]}, bias length {b.shape[0]}"
        )
    return M @ v + b


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], theta, h: float | None = None, vectorized: bool = False
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    With ``h=None`` each coordinate uses ``1e-5 * max(1, |theta_i|)``; a given
    ``h`` is used as-is for every coordinate.

    ``vectorized=True`` means ``f`` accepts a ``(k, n)`` stack of parameter
    vectors and returns ``k`` values; all ``2n`` probes go in one call.
    """
    theta = np.array(theta, dtype=np.float64).reshape(-1)
    if h is not None and not h > 0:
        raise ValueError("finite difference step must be positive")
    n = theta.size
    steps = np.full(n, h) if h is not None else 1e-5 * np.maximum(1.0, np.abs(theta))
    if vectorized:
        probes = np.repeat(theta[None], 2 * n, axis=0)
        idx = np.arange(n)
        probes[idx, idx] += steps
        probes[n + idx, idx] -= steps
        vals = np.asarray(f(probes), dtype=np.float64).reshape(-1)
        if vals.size != 2 * n:
            raise ValueError(f"vectorized objective returned {vals.size} values, expected {2 * n}")
        fp, fm = vals[:n], vals[n:]
    else:
        fp = np.empty(n)
        fm = np.empty(n)
        for i in range(n):
            probe = theta.copy()
            probe[i] = theta[i] + steps[i]
            fp[i] = float(f(probe))
            probe[i] = theta[i] - steps[i]
            fm[i] = float(f(probe))
    bad = ~(np.isfinite(fp) & np.isfinite(fm))
    if bad.any():
        raise ValueError(f"objective is not finite near coordinate {int(np.argmax(bad))}")
    return (fp - fm) / (2.0 * steps)


class SeededRng:
    """Deterministic random stream backed by numpy's PCG64 bit generator.

    PCG64 output for a given integer seed is fixed by numpy's stream
    compatibility policy, so the same seed yields the same numbers on every
    platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def algorithm(self) -> str:
        return RNG_ALGORITHM

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def poisson(self, lam: float) -> int:
        return int(self._gen.poisson(lam))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream derived from this seed and ``key``."""
        child = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        return SeededRng(int(child.generate_state(1, np.uint64)[0]))
