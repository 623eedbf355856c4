"""Dense matrix kernels: SVD, numerical rank, left null spaces, least squares.

Matrices are plain 2-D ``float64`` numpy arrays.  The rank threshold follows
the single-precision convention ``max(rows, cols) * eps * ||M||_2`` with
``eps = 1.19209e-07`` even though all arithmetic runs in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import lapack

#: Single-precision machine epsilon used by the rank threshold.
SINGLE_EPS = 1.19209e-07


class SVDConvergenceError(np.linalg.LinAlgError):
    """The SVD iteration did not converge.

    ``iterations`` holds the sweep count for the Jacobi solver, or the number
    of unconverged superdiagonals reported by LAPACK.
    """

    def __init__(self, method: str, iterations: int):
        self.method = method
        self.iterations = iterations
        super().__init__(f"SVD ({method}) did not converge after {iterations} iterations")


@dataclass(frozen=True)
class RankReport:
    singular_values: np.ndarray
    threshold: float
    numerical_rank: int
    nullity: int

    @property
    def rows(self) -> int:
        return self.numerical_rank + self.nullity


def as_matrix(m) -> np.ndarray:
    """Return ``m`` as a finite 2-D float64 array or raise ``ValueError``."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or Inf entries")
    return arr


def svd(m, method: str = "lapack", full_matrices: bool = False, max_sweeps: int = 60):
    """Singular value decomposition ``m = U @ diag(S) @ Vt``.

    Parameters
    ----------
    m : array_like
        Finite ``rows x cols`` matrix.
    method : {"lapack", "jacobi"}
        ``"lapack"`` calls ``dgesdd`` (Golub-Kahan bidiagonalisation with
        divide and conquer).  ``"jacobi"`` runs the one-sided Jacobi solver in
        this module; it is slower but fully independent of LAPACK.
    full_matrices : bool
        Return square ``U`` (rows x rows) and ``Vt`` (cols x cols).
    max_sweeps : int
        Sweep budget for the Jacobi solver.

    Returns
    -------
    U, S, Vt
        ``S`` is non-increasing and non-negative.

    Raises
    ------
    SVDConvergenceError
        If the solver fails to converge.
    """
    a = as_matrix(m)
    if method == "lapack":
        return _lapack_svd(a, full_matrices)
    if method == "jacobi":
        return _jacobi_svd(a, full_matrices, max_sweeps)
    raise ValueError(f"unknown SVD method {method!r}")


def singular_values(m) -> np.ndarray:
    a = as_matrix(m)
    if a.size == 0:
        return np.zeros(0)
    _, s, _, info = lapack.dgesdd(a, compute_uv=0)
    if info > 0:
        raise SVDConvergenceError("lapack", int(info))
    return s


def _lapack_svd(a: np.ndarray, full_matrices: bool):
    rows, cols = a.shape
    if a.size == 0:
        u = np.eye(rows) if full_matrices else np.zeros((rows, 0))
        vt = np.eye(cols) if full_matrices else np.zeros((0, cols))
        return u, np.zeros(0), vt
    u, s, vt, info = lapack.dgesdd(a, compute_uv=1, full_matrices=int(full_matrices))
    if info > 0:
        raise SVDConvergenceError("lapack", int(info))
    if info < 0:
        raise ValueError(f"dgesdd rejected argument {-info}")
    return u, s, vt


def _jacobi_svd(a: np.ndarray, full_matrices: bool, max_sweeps: int):
    rows, cols = a.shape
    transposed = rows < cols
    g = (a.T if transposed else a).copy()
    m, n = g.shape
    v = np.eye(n)
    tol = np.finfo(np.float64).eps * m

    for _sweep in range(1, max_sweeps + 1):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gp, gq = g[:, p], g[:, q]
                alpha = gp @ gp
                beta = gq @ gq
                gamma = gp @ gq
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                g[:, [p, q]] = np.column_stack((c * gp - s * gq, s * gp + c * gq))
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise SVDConvergenceError("jacobi", max_sweeps)

    sv = np.linalg.norm(g, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, g, v = sv[order], g[:, order], v[:, order]
    k = min(m, n)
    sv, g, v_k = sv[:k], g[:, :k], v[:, :k]

    u = np.zeros((m, k))
    good = sv > sv[0] * np.finfo(np.float64).eps * max(m, n) if k else np.zeros(0, bool)
    u[:, good] = g[:, good] / sv[good]
    width = m if full_matrices else k
    u = _complete_orthonormal(u[:, good], width)
    if full_matrices:
        v_k = v
    if transposed:
        return v_k, sv, u.T
    return u, sv, v_k.T


def _complete_orthonormal(q: np.ndarray, width: int) -> np.ndarray:
    """Extend orthonormal columns ``q`` to ``width`` orthonormal columns."""
    m, r = q.shape
    if r >= width:
        return q[:, :width]
    basis, _ = np.linalg.qr(np.hstack([q, np.eye(m)]))
    extra = basis[:, r:width]
    return np.hstack([q, extra])


def numerical_rank(m, eps: float = SINGLE_EPS) -> RankReport:
    """Count singular values above ``max(rows, cols) * eps * sigma_max``."""
    a = as_matrix(m)
    s = singular_values(a)
    sigma_max = float(s[0]) if s.size else 0.0
    threshold = max(a.shape) * eps * sigma_max
    rank = int(np.count_nonzero(s > threshold))
    return RankReport(singular_values=s, threshold=threshold,
                      numerical_rank=rank, nullity=a.shape[0] - rank)


def left_null_space_basis(m, eps: float = SINGLE_EPS) -> np.ndarray:
    """Orthonormal basis of ``{v : v @ m = 0}``, one basis vector per row.

    The dimension equals the nullity reported by :func:`numerical_rank` for
    the same ``eps``.
    """
    a = as_matrix(m)
    rows = a.shape[0]
    if a.size == 0:
        return np.eye(rows)
    u, s, _ = _lapack_svd(a, full_matrices=True)
    threshold = max(a.shape) * eps * s[0]
    rank = int(np.count_nonzero(s > threshold))
    return np.ascontiguousarray(u[:, rank:].T)


def least_squares(a, b, rcond: float | None = None) -> np.ndarray:
    """Minimum-norm ``x`` minimising ``||a @ x - b||_F``.

    Singular values at or below ``rcond * sigma_max`` are treated as zero;
    the default ``rcond`` is ``max(a.shape) * float64 eps``.
    """
    a = as_matrix(a)
    b_arr = np.asarray(b, dtype=np.float64)
    vector_rhs = b_arr.ndim == 1
    b2 = as_matrix(b_arr[:, None] if vector_rhs else b_arr)
    if a.shape[0] != b2.shape[0]:
        raise ValueError(f"row mismatch: a has {a.shape[0]} rows, b has {b2.shape[0]}")
    u, s, vt = _lapack_svd(a, full_matrices=False)
    if rcond is None:
        rcond = max(a.shape) * np.finfo(np.float64).eps
    cutoff = rcond * (s[0] if s.size else 0.0)
    keep = s > cutoff
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    x = vt.T @ (inv[:, None] * (u.T @ b2))
    return x[:, 0] if vector_rhs else x


def write_matrix_csv(path, m) -> None:
    """Write a matrix as row-major decimal CSV with full round-trip precision."""
    a = as_matrix(m)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in a:
            fh.write(",".join(format(float(x), ".17g") for x in row))
            fh.write("\n")


def read_matrix_csv(path) -> np.ndarray:
    text = Path(path).read_text(encoding="ascii").strip()
    if not text:
        return np.zeros((0, 0))
    rows = [[float(x) for x in line.split(",")] for line in text.splitlines() if line.strip()]
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged rows with widths {sorted(widths)}")
    return as_matrix(rows)
