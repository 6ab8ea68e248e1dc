"""Deterministic dense linear algebra and seeded sampling.

Everything downstream draws randomness through :class:`SeededRng`, a
counter-based generator keyed by ``(seed, stream)``.  Substreams derived
with :meth:`SeededRng.derive` are statistically independent and stable
across platforms and worker counts, which is what makes the Monte-Carlo
estimates and the training pipeline bit-reproducible.

All matrices are plain row-major ``float64`` numpy arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import DefinitenessError, DifforaError, DimensionError, ShapeError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Tolerance below which an almost-symmetric matrix is silently symmetrized.
SYMMETRY_TOL = 1e-10


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class SeededRng:
    """Counter-based random stream identified by ``(seed, stream)``.

    The core is Philox-4x64 keyed with the pair, so identical identifiers
    reproduce identical draw sequences regardless of platform or thread
    count.  Normal deviates come from Box-Muller applied to the uniform
    stream, two per uniform pair, consumed in generation order.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, index: int) -> "SeededRng":
        """Independent substream; stable function of (stream, index)."""
        sub = _splitmix64(self.stream ^ (((int(index) + 1) * _GOLDEN) & _MASK64))
        return SeededRng(self.seed, sub)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles uniform on [0, 1)."""
        return self._gen.random(int(n))

    def normal(self, n: int) -> np.ndarray:
        """n standard-normal doubles via Box-Muller."""
        n = int(n)
        pairs = (n + 1) // 2
        u1 = self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        # 1 - u1 lies in (0, 1], keeping the log finite.
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers uniform on [0, high)."""
        return np.minimum((self._gen.random(int(n)) * high).astype(np.int64), high - 1)


def gaussian_matrix(rows: int, cols: int, rng: SeededRng) -> np.ndarray:
    """(rows x cols) matrix of i.i.d. standard-normal draws.

    The stream is consumed row-major and is shape-independent: the first
    rows*cols draws are identical for any factorization of the same count.
    """
    if rows < 1 or cols < 1:
        raise DimensionError(f"gaussian_matrix needs positive dims, got {rows}x{cols}")
    return rng.normal(rows * cols).reshape(rows, cols)


def sign_vector(m: int, rng: SeededRng) -> np.ndarray:
    """(m x 1) vector of equiprobable -1/+1 entries."""
    if m < 1:
        raise DimensionError(f"sign_vector needs m >= 1, got {m}")
    u = rng.uniform(m)
    return np.where(u < 0.5, -1.0, 1.0).reshape(m, 1)


def _check_symmetric_square(m: np.ndarray, what: str) -> np.ndarray:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{what} needs a square matrix, got shape {m.shape}")
    if m.shape[0] > 256:
        raise ShapeError(f"{what} supports n <= 256, got n = {m.shape[0]}")
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ShapeError(f"{what} needs symmetry within {SYMMETRY_TOL:g}, asymmetry {asym:.3e}")
    return 0.5 * (m + m.T)


def jacobi_eigenvalues(m: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, ascending, via cyclic Jacobi.

    Sweeps of plane rotations run until the off-diagonal Frobenius norm
    drops below ``tol``; the diagonal then holds the eigenvalues to within
    ``tol`` (Weyl perturbation of the remaining off-diagonal mass).
    """
    a = _check_symmetric_square(np.asarray(m, dtype=np.float64), "jacobi_eigenvalues").copy()
    n = a.shape[0]
    if n == 1:
        return a.diagonal().copy()
    for _ in range(60):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < tol / (4.0 * n * n):
                    continue
                app, aqq = a[p, p], a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                a[p, :] = a[:, p]
                a[q, :] = a[:, q]
                # 2x2 block from the closed form for the annihilating angle
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
    else:
        raise DifforaError("jacobi_eigenvalues failed to converge in 60 sweeps")
    return np.sort(a.diagonal())


def min_eigenvalue(m: np.ndarray, tol: float = 1e-10) -> float:
    """Smallest eigenvalue of a symmetric matrix (error at most ``tol``)."""
    return float(jacobi_eigenvalues(m, tol=tol)[0])


def _cholesky(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - low[j, :j] @ low[j, :j]
        if d <= 0.0:
            raise DefinitenessError("matrix is not positive definite", min_eigenvalue(a))
        low[j, j] = np.sqrt(d)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def solve_spd(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve M x = b for symmetric positive definite M via Cholesky.

    One step of iterative refinement keeps the residual below
    1e-8 * max|b| even for moderately conditioned systems.
    """
    m = np.asarray(m, dtype=np.float64)
    sym = _check_symmetric_square(m, "solve_spd")
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    if b.shape[0] != sym.shape[0]:
        raise DimensionError(f"solve_spd rhs has {b.shape[0]} rows, matrix is {sym.shape[0]}")
    lam = min_eigenvalue(sym)
    if lam <= 1e-10:
        raise DefinitenessError("solve_spd needs min eigenvalue > 1e-10", lam)
    low = _cholesky(sym)

    def _solve(rhs: np.ndarray) -> np.ndarray:
        n = sym.shape[0]
        y = np.zeros_like(rhs)
        for i in range(n):
            y[i] = (rhs[i] - low[i, :i] @ y[:i]) / low[i, i]
        x = np.zeros_like(rhs)
        for i in range(n - 1, -1, -1):
            x[i] = (y[i] - low[i + 1 :, i] @ x[i + 1 :]) / low[i, i]
        return x

    x = _solve(b)
    scale = float(np.max(np.abs(b))) or 1.0
    for _ in range(2):
        resid = b - sym @ x
        if float(np.max(np.abs(resid))) <= 1e-8 * scale:
            break
        x = x + _solve(resid)
    return x
