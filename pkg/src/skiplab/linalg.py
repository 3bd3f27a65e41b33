"""Dense linear-algebra substrate.

Everything downstream differentiates matrix-valued maps through vectorized
coordinates, so the one convention that matters lives here: ``vec`` stacks
columns.  Under that convention vec(A X B) = (B^T kron A) vec(X), which is the
form every Kronecker factor in the attention Jacobian takes.

All matrices are dense float64 ndarrays; condition numbers come from a full
SVD (desk-scale sizes), never from iterative estimators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Element cap for dense products (kron outputs, stacked Jacobians).
DEFAULT_MAX_ELEMENTS = 1 << 25

# Relative threshold below which sigma_min counts as numerically zero.
DEFAULT_RANK_TOL = 1e-12


class BudgetError(MemoryError):
    """Requested dense matrix exceeds the configured element budget."""


class SvdConvergenceError(RuntimeError):
    """The SVD iteration failed; results would be garbage, so none are returned."""


def _check_budget(rows: int, cols: int, max_elements: int) -> None:
    if rows * cols > max_elements:
        raise BudgetError(
            f"dense {rows}x{cols} result holds {rows * cols} elements, "
            f"budget is {max_elements}"
        )


def vec(m: np.ndarray) -> np.ndarray:
    """Column-major vectorization: stack the columns of ``m`` into one vector."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"vec expects a 2-D matrix, got shape {m.shape}")
    return m.reshape(-1, order="F").copy()


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`: rebuild the rows x cols matrix column by column."""
    v = np.asarray(v, dtype=float)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape {v.size} entries into {rows}x{cols}")
    return v.reshape(rows, cols, order="F").copy()


def commutation_matrix(n: int, d: int, max_elements: int = DEFAULT_MAX_ELEMENTS) -> np.ndarray:
    """Permutation K with K @ vec(X) = vec(X^T) for every n x d matrix X.

    K maps the column-major position of X[i, j] (= i + j*n) to the
    column-major position of X^T[j, i] (= j + i*d).
    """
    if n < 1 or d < 1:
        raise ValueError("commutation_matrix needs n, d >= 1")
    _check_budget(n * d, n * d, max_elements)
    i, j = np.meshgrid(np.arange(n), np.arange(d), indexing="ij")
    src = (i + j * n).ravel()
    dst = (j + i * d).ravel()
    K = np.zeros((n * d, n * d))
    K[dst, src] = 1.0
    return K


def kron(a: np.ndarray, b: np.ndarray, max_elements: int = DEFAULT_MAX_ELEMENTS) -> np.ndarray:
    """Kronecker product with an element-budget guard."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_budget(a.shape[0] * b.shape[0], a.shape[1] * b.shape[1], max_elements)
    return np.kron(a, b)


@dataclass(frozen=True)
class SingularSpectrum:
    """Thin SVD of a matrix: M = U diag(values) V^T.

    values are non-increasing and non-negative; U and V have orthonormal
    columns.
    """

    values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray

    @property
    def sigma_max(self) -> float:
        return float(self.values[0])

    @property
    def sigma_min(self) -> float:
        return float(self.values[-1])

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.values) @ self.right_vectors.T


@dataclass(frozen=True)
class ConditionNumber:
    """sigma_max / sigma_min, or infinity when sigma_min is numerically zero.

    rank_tolerance is the relative threshold that declared sigma_min zero; it
    is carried along so INFINITE verdicts stay auditable.
    """

    value: float
    rank_tolerance: float = DEFAULT_RANK_TOL

    @property
    def is_infinite(self) -> bool:
        return not np.isfinite(self.value)

    def __float__(self) -> float:
        return self.value

    def __str__(self) -> str:
        return "INFINITE" if self.is_infinite else repr(self.value)


def svd(m: np.ndarray) -> SingularSpectrum:
    """Thin SVD wrapped so non-convergence surfaces as a distinct error.

    Falls back from the fast divide-and-conquer driver to the slower but
    sturdier Jacobi-style driver before giving up."""
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains non-finite entries")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        try:
            import scipy.linalg
            u, s, vt = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
        except Exception as exc:
            raise SvdConvergenceError(f"SVD did not converge for shape {m.shape}") from exc
    return SingularSpectrum(values=s, left_vectors=u, right_vectors=vt.T)


def singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values only (non-increasing)."""
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise ValueError("singular_values input contains non-finite entries")
    try:
        return np.linalg.svd(m, compute_uv=False)
    except np.linalg.LinAlgError:
        try:
            import scipy.linalg
            return scipy.linalg.svd(m, compute_uv=False, lapack_driver="gesvd")
        except Exception as exc:
            raise SvdConvergenceError(f"SVD did not converge for shape {m.shape}") from exc


def condition_number(m: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> ConditionNumber:
    """Spectral condition number from a full SVD.

    Returns INFINITE (value = inf) when sigma_min <= rel_tol * sigma_max,
    i.e. the matrix is numerically rank deficient at the stated tolerance.
    """
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    s = singular_values(m)
    smax = float(s[0])
    smin = float(s[-1])
    if smax == 0.0 or smin <= rel_tol * smax:
        return ConditionNumber(value=float("inf"), rank_tolerance=rel_tol)
    return ConditionNumber(value=smax / smin, rank_tolerance=rel_tol)


def spectral_norm(m: np.ndarray) -> float:
    """Largest singular value."""
    return float(singular_values(m)[0])


def sample_orthogonal(dim: int, seed: int) -> np.ndarray:
    """Seed-deterministic random orthogonal matrix.

    Gaussian matrix followed by QR; the sign of each column is pinned so the
    largest-magnitude entry of the column is positive, which makes the result
    unique (dim=1 always yields [[1.]]).
    """
    if dim < 1:
        raise ValueError("sample_orthogonal needs dim >= 1")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diagonal(r))
    return pin_column_signs(q)


def pin_column_signs(m: np.ndarray) -> np.ndarray:
    """Flip column signs so each column's largest-|entry| is positive."""
    m = np.asarray(m, dtype=float)
    lead = m[np.argmax(np.abs(m), axis=0), np.arange(m.shape[1])]
    signs = np.where(lead < 0.0, -1.0, 1.0)
    return m * signs
