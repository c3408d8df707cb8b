"""Dense linear algebra helpers for small control-sized matrices.

Everything operates on plain float64 numpy arrays. LAPACK (through numpy)
does the actual factoring; the wrappers here pin down input contracts,
deterministic ordering, and the failure behaviour the rest of the package
relies on.
"""

from __future__ import annotations

from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, NumericError, ShapeError

ArrayLike = Union[np.ndarray, Sequence[Sequence[float]]]

# Largest per-entry asymmetry |m - m.T| accepted by the symmetric routines.
SYMMETRY_ATOL = 1e-9
# solve_linear refuses systems with a worse 2-norm condition estimate.
CONDITION_LIMIT = 1e13


def as_matrix(data: ArrayLike, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float64 array with finite entries.

    Optional `rows`/`cols` pin the expected shape; mismatches raise
    ShapeError rather than silently broadcasting.
    """
    m = np.array(data, dtype=float, copy=True)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got array of ndim {m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ContractError("matrix entries must be finite")
    return m


def require_square(m: np.ndarray, what: str = "matrix") -> int:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{what} must be square, got shape {m.shape}")
    return m.shape[0]


def is_symmetric(m: np.ndarray, atol: float = SYMMETRY_ATOL) -> bool:
    return bool(np.all(np.abs(m - m.T) <= atol))


def sym_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def mat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("mat_mul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


class SymEigDecomposition(NamedTuple):
    eigenvalues: np.ndarray   # ascending, shape (n,)
    eigenvectors: np.ndarray  # orthogonal columns, eigenvectors[:, k] <-> eigenvalues[k]


def sym_eig(m: np.ndarray) -> SymEigDecomposition:
    """Full eigendecomposition of a symmetric matrix.

    Input asymmetry beyond SYMMETRY_ATOL is a contract violation; below it
    the matrix is symmetrized before factoring so the result is exact for
    the symmetric part.
    """
    require_square(m, "sym_eig input")
    if not is_symmetric(m):
        worst = float(np.max(np.abs(m - m.T)))
        raise ContractError(f"sym_eig requires a symmetric matrix (max asymmetry {worst:.3e})")
    w, v = np.linalg.eigh(sym_part(m))
    return SymEigDecomposition(w, v)


def min_eig_sym(m: np.ndarray) -> float:
    """Smallest eigenvalue of a (nearly) symmetric matrix; no symmetry gate."""
    return float(np.linalg.eigvalsh(sym_part(m))[0])


def general_eigenvalues(m: np.ndarray) -> np.ndarray:
    """Eigenvalues of a general real square matrix, as complex numbers.

    Sorted by (real, imag) so repeated calls on equal inputs agree exactly.
    """
    require_square(m, "general_eigenvalues input")
    w = np.linalg.eigvals(m)
    order = np.lexsort((w.imag, w.real))
    return w[order]


def solve_linear(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a x = b for square a, refusing near-singular systems.

    Raises NumericError with a condition estimate when the 2-norm condition
    number exceeds CONDITION_LIMIT or the factorization breaks down.
    """
    n = require_square(a, "solve_linear coefficient")
    if b.shape[0] != n:
        raise ShapeError(f"right-hand side has {b.shape[0]} rows, expected {n}")
    cond = float(np.linalg.cond(a))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise NumericError("coefficient matrix is singular or near-singular", condition=cond)
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded by cond test
        raise NumericError(f"linear solve failed: {exc}", condition=cond) from exc


def cholesky(m: np.ndarray) -> Optional[np.ndarray]:
    """Lower-triangular factor with m = L @ L.T, or None if m is not
    positive definite. Symmetry is required up to SYMMETRY_ATOL."""
    require_square(m, "cholesky input")
    if not is_symmetric(m):
        worst = float(np.max(np.abs(m - m.T)))
        raise ContractError(f"cholesky requires a symmetric matrix (max asymmetry {worst:.3e})")
    try:
        return np.linalg.cholesky(sym_part(m))
    except np.linalg.LinAlgError:
        return None
