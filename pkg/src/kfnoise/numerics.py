"""Small dense linear algebra, seeded random streams and summary statistics.

Matrices are plain 2-D ``float64`` numpy arrays. The random stream is a
counter-based SplitMix64 generator: the i-th 64-bit word of a stream is a
pure function of ``(seed, i)``, so streams are reproducible, can be
drawn in vectorised blocks, and never depend on numpy's global state.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NotPositiveDefiniteError, SingularMatrixError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix64(states: np.ndarray) -> np.ndarray:
    z = states.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class RandomSource:
    """Reproducible stream of variates.

    Word ``i`` of the stream is ``mix(seed + (i + 1) * golden)`` (the
    SplitMix64 sequence). Uniforms use the top 53 bits and lie strictly
    inside (0, 1); normals use the Box-Muller transform on pairs of
    uniforms. A source is single-owner: derive a new seed for parallel work
    instead of sharing one instance.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, counter={self.counter})"

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _splitmix64(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, n: int | None = None, low: float = 0.0, high: float = 1.0):
        count = 1 if n is None else int(n)
        u = ((self.raw(count) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        out = low + (high - low) * u
        return float(out[0]) if n is None else out

    def normal(self, n: int | None = None):
        count = 1 if n is None else int(n)
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        z = z[:count]
        return float(z[0]) if n is None else z

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, offset: int) -> "RandomSource":
        """Independent source seeded ``seed + offset``."""
        return RandomSource(self.seed + offset)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def solve_linear(A, B) -> np.ndarray:
    """Solve ``A X = B`` by Gaussian elimination with partial pivoting.

    Raises :class:`SingularMatrixError` when a pivot falls below
    ``1e-14 * max|A|``.
    """
    A = as_matrix(A, "A")
    b_was_vector = np.ndim(B) == 1
    B = as_matrix(B, "B")
    n = A.shape[0]
    if A.shape != (n, n):
        raise DimensionError(f"A must be square, got {A.shape}")
    if B.shape[0] != n:
        raise DimensionError(f"B has {B.shape[0]} rows, A is {n}x{n}")

    lu = A.copy()
    x = B.copy()
    scale = np.max(np.abs(lu)) if lu.size else 0.0
    tol = 1e-14 * scale
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if scale == 0.0 or abs(lu[p, k]) < tol:
            raise SingularMatrixError(f"pivot {k} is {lu[p, k]:.3e} (tolerance {tol:.3e})")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            x[[k, p]] = x[[p, k]]
        factors = lu[k + 1 :, k] / lu[k, k]
        lu[k + 1 :, k:] -= np.outer(factors, lu[k, k:])
        x[k + 1 :] -= np.outer(factors, x[k])
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - lu[k, k + 1 :] @ x[k + 1 :]) / lu[k, k]
    return x.ravel() if b_was_vector else x


def cholesky_factor(A) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == A``."""
    A = as_matrix(A, "A")
    n = A.shape[0]
    if A.shape != (n, n):
        raise DimensionError(f"A must be square, got {A.shape}")
    scale = max(np.max(np.abs(A)), np.finfo(float).tiny)
    if np.max(np.abs(A - A.T)) > 1e-12 * scale:
        raise NotPositiveDefiniteError("matrix is not symmetric")
    L = np.zeros_like(A)
    for j in range(n):
        d = A[j, j] - L[j, :j] @ L[j, :j]
        if d <= 0.0:
            raise NotPositiveDefiniteError(f"non-positive pivot {d:.3e} at column {j}")
        L[j, j] = np.sqrt(d)
        L[j + 1 :, j] = (A[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


def gaussian_vector(rng: RandomSource, cov) -> np.ndarray:
    """One draw from ``N(0, cov)``; a zero covariance yields the zero vector."""
    cov = as_matrix(cov, "cov")
    n = cov.shape[0]
    if not np.any(cov):
        return np.zeros(n)
    return cholesky_factor(cov) @ rng.normal(n)


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise DimensionError("rmse of empty series")
    return float(np.sqrt(np.mean((a - b) ** 2)))
