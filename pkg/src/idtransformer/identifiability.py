"""Alternative attention matrices that leave a head's output unchanged.

Given attention ``A`` and the head transform ``T`` (so the head output is
``A @ T``), an admissible perturbation ``Atilde`` satisfies
``Atilde @ T = 0``.  Two constructions are provided:

* the logits case, where ``A`` is a raw logit matrix and ``A + Atilde`` must
  keep rank at most ``d_k``;
* the softmax case, where ``A + Atilde`` must stay row-stochastic
  (non-negative, rows in the left null space of ``[T, 1]``) and the logits
  recovered from it are checked against the ``d_k`` rank ceiling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .linalg import SINGLE_EPS, as_matrix, least_squares, left_null_space_basis, numerical_rank

P1_TOL = 1e-10
P2_REL_TOL = 1e-6
P3_TOL = 1e-9
R1_REL_TOL = 1e-6
STOCHASTIC_TOL = 1e-9
LOG_FLOOR = 1e-12
ONE_HOT_TOL = 1e-6
ROW_SCALE_SAFETY = 0.99
COEFF_RANGE = 10.0
NONTRIVIAL_NORM = 1e-8


class OneHotRowError(ValueError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"attention row {row} is one-hot; no admissible perturbation exists")


@dataclass(frozen=True)
class ConstraintReport:
    """Pass flags and violation metrics for P1-P4 and R1-R2.

    ``p4_rank``/``r2_rank`` are ``None`` when ``d_k`` was not supplied;
    ``p4_rank`` is also ``None`` when ``A + Atilde`` is not row-stochastic,
    since no logits exist for it then.
    """

    p1_nonneg: bool
    p1_worst: float
    p2_nullspace: bool
    p2_max: float
    p3_rowsum: bool
    p3_max: float
    p4_rank: bool | None
    p4_logit_rank: int | None
    r1_output_preserved: bool
    r1_relative: float
    r2_rank: bool | None
    r2_attention_rank: int
    d_k: int | None

    @property
    def softmax_admissible(self) -> bool:
        """P1-P3 all hold."""
        return self.p1_nonneg and self.p2_nullspace and self.p3_rowsum

    def flags(self) -> dict[str, bool | None]:
        return {"p1": self.p1_nonneg, "p2": self.p2_nullspace, "p3": self.p3_rowsum,
                "p4": self.p4_rank, "r1": self.r1_output_preserved, "r2": self.r2_rank}


@dataclass
class AtildeResult:
    atilde: np.ndarray
    basis_used: np.ndarray
    coefficients: np.ndarray
    report: ConstraintReport
    identifiable: bool = False
    reconstructed_logits: np.ndarray | None = None
    reconstructed_rank: int | None = None
    independent_rows: np.ndarray | None = None
    row_lambdas: np.ndarray | None = None

    @property
    def nontrivial(self) -> bool:
        return float(np.linalg.norm(self.atilde)) > NONTRIVIAL_NORM


def nullity_formulas(d_s: int, d_v: int) -> tuple[int, int]:
    """Generic nullities of ``T`` and ``[T, 1]`` for ``d_s`` tokens and value size ``d_v``."""
    if d_s < 1 or d_v < 1:
        raise ValueError("dimensions must be positive")
    return max(d_s - d_v, 0), max(d_s - (d_v + 1), 0)


def augment_ones(T) -> np.ndarray:
    T = as_matrix(T)
    return np.hstack([T, np.ones((T.shape[0], 1))])


def _max_abs(m: np.ndarray) -> float:
    return float(np.abs(m).max()) if m.size else 0.0


def _is_row_stochastic(m: np.ndarray) -> bool:
    return bool(m.min() >= -P1_TOL and np.abs(m.sum(axis=1) - 1.0).max() <= STOCHASTIC_TOL)


def reconstruct_logits(A_plus, c="minus_a_hat_1", eps: float = SINGLE_EPS):
    """Logits whose row softmax is ``A_plus``: ``A_l[i, k] = c[i] + log A_plus[i, k]``.

    ``c`` is ``"minus_a_hat_1"`` (subtract the log of the first column, so
    that column of ``A_l`` is zero), ``"zeros"``, or an explicit vector.
    Entries are floored at 1e-12 before the logarithm.

    Returns ``(A_l, numerical_rank(A_l))``.
    """
    A_plus = as_matrix(A_plus)
    if not _is_row_stochastic(A_plus):
        raise ValueError("input is not row-stochastic")
    log_a = np.log(np.maximum(A_plus, LOG_FLOOR))
    if isinstance(c, str):
        if c == "minus_a_hat_1":
            shift = -log_a[:, 0]
        elif c == "zeros":
            shift = np.zeros(A_plus.shape[0])
        else:
            raise ValueError(f"unknown c choice {c!r}")
    else:
        shift = np.asarray(c, dtype=np.float64).reshape(-1)
        if shift.shape[0] != A_plus.shape[0]:
            raise ValueError(f"c has {shift.shape[0]} entries for {A_plus.shape[0]} rows")
    A_l = log_a + shift[:, None]
    return A_l, numerical_rank(A_l, eps).numerical_rank


def check_constraints(A, atilde, T, d_k: int | None = None, eps: float = SINGLE_EPS,
                      logit_rank: int | None = None) -> ConstraintReport:
    """Evaluate every constraint on a candidate perturbation.

    Tolerances: P1 entries of ``A + Atilde`` >= -1e-10; P2 ``max|Atilde T|``
    <= 1e-6 (1 + max|T|); P3 ``max|Atilde 1|`` <= 1e-9; R1
    ``max|(A + Atilde) T - A T|`` <= 1e-6 max(1, max|A T|); P4/R2 compare
    numerical ranks with ``d_k``.  ``logit_rank`` skips recomputing the
    reconstructed-logit rank when the caller already has it.
    """
    A = as_matrix(A)
    atilde = as_matrix(atilde)
    T = as_matrix(T)
    if A.shape != atilde.shape or A.shape[0] != A.shape[1] or T.shape[0] != A.shape[0]:
        raise ValueError(f"incompatible shapes A {A.shape}, Atilde {atilde.shape}, T {T.shape}")
    A_plus = A + atilde
    AT = A @ T
    AtT = atilde @ T

    p1_worst = float(A_plus.min())
    p2_max = _max_abs(AtT)
    p3_max = _max_abs(atilde.sum(axis=1))
    r1_rel = _max_abs(A_plus @ T - AT) / max(1.0, _max_abs(AT))
    attention_rank = numerical_rank(A_plus, eps).numerical_rank

    p4_pass = None
    if d_k is not None and logit_rank is None and _is_row_stochastic(A_plus):
        _, logit_rank = reconstruct_logits(A_plus, "minus_a_hat_1", eps)
    if d_k is not None and logit_rank is not None:
        p4_pass = logit_rank <= d_k

    return ConstraintReport(
        p1_nonneg=p1_worst >= -P1_TOL, p1_worst=p1_worst,
        p2_nullspace=p2_max <= P2_REL_TOL * (1.0 + _max_abs(T)), p2_max=p2_max,
        p3_rowsum=p3_max <= P3_TOL, p3_max=p3_max,
        p4_rank=p4_pass, p4_logit_rank=logit_rank,
        r1_output_preserved=r1_rel <= R1_REL_TOL, r1_relative=r1_rel,
        r2_rank=None if d_k is None else attention_rank <= d_k,
        r2_attention_rank=attention_rank, d_k=d_k,
    )


def independent_rows(A, limit: int | None = None, eps: float = SINGLE_EPS) -> np.ndarray:
    """Greedy pivot: keep row ``i`` when it raises the numerical rank of the kept set."""
    A = as_matrix(A)
    target = numerical_rank(A, eps).numerical_rank
    if limit is not None:
        target = min(target, limit)
    chosen: list[int] = []
    for i in range(A.shape[0]):
        if len(chosen) >= target:
            break
        if numerical_rank(A[chosen + [i]], eps).numerical_rank > len(chosen):
            chosen.append(i)
    return np.array(chosen, dtype=np.int64)


def construct_atilde_logits(A, T, d_k: int, seed=0, eps: float = SINGLE_EPS) -> AtildeResult:
    """Non-trivial ``Atilde`` with ``Atilde T = 0`` and ``rank(A + Atilde) <= d_k``.

    Rows ``i`` of a maximal independent set of ``A`` get random rows of
    ``Atilde`` from the left null space of ``T``; every other row ``j`` is
    expressed as ``a_j = sum_i lambda_i^j a_i`` and receives
    ``sum_i lambda_i^j atilde_i``, so ``A + Atilde`` keeps the row dependencies
    of ``A``.  Returns a zero, identifiable result when ``T`` has full row
    rank.
    """
    A = as_matrix(A)
    T = as_matrix(T)
    d_s = A.shape[0]
    if A.shape != (d_s, d_s) or T.shape[0] != d_s:
        raise ValueError(f"incompatible shapes A {A.shape}, T {T.shape}")
    rank_a = numerical_rank(A, eps).numerical_rank
    if rank_a > d_k:
        raise ValueError(f"rank(A) = {rank_a} exceeds d_k = {d_k}; A cannot come from a head")

    basis = left_null_space_basis(T, eps)
    if basis.shape[0] == 0:
        zero = np.zeros_like(A)
        return AtildeResult(atilde=zero, basis_used=basis, coefficients=np.zeros((0, 0)),
                            report=check_constraints(A, zero, T, d_k, eps), identifiable=True)

    rng = np.random.default_rng(seed)
    rows = independent_rows(A, d_k, eps)
    dependent = np.setdiff1d(np.arange(d_s), rows)
    coeffs = rng.uniform(-COEFF_RANGE, COEFF_RANGE, size=(rows.size, basis.shape[0]))
    atilde = np.zeros_like(A)
    atilde[rows] = coeffs @ basis
    lambdas = least_squares(A[rows].T, A[dependent].T) if dependent.size else np.zeros((rows.size, 0))
    atilde[dependent] = lambdas.T @ atilde[rows]
    return AtildeResult(atilde=atilde, basis_used=basis, coefficients=coeffs,
                        report=check_constraints(A, atilde, T, d_k, eps),
                        independent_rows=rows, row_lambdas=lambdas)


def scale_rows_nonnegative(A: np.ndarray, atilde: np.ndarray,
                           safety: float = ROW_SCALE_SAFETY) -> np.ndarray:
    """Per-row factors ``safety * min(1, min_k A_ik / |atilde_ik|)`` over negative entries."""
    neg = atilde < 0
    ratios = np.full(A.shape, np.inf)
    np.divide(A, -atilde, out=ratios, where=neg)
    return safety * np.minimum(1.0, ratios.min(axis=1))


def _check_not_one_hot(A: np.ndarray) -> None:
    hot = np.flatnonzero(A.max(axis=1) > 1.0 - ONE_HOT_TOL)
    if hot.size:
        raise OneHotRowError(int(hot[0]))


def iter_atilde_softmax(A, T, n_samples: int, seed=0, d_k: int | None = None,
                        eps: float = SINGLE_EPS) -> Iterator[AtildeResult]:
    """Lazily yield softmax-case perturbations; see :func:`construct_atilde_softmax`."""
    A = as_matrix(A)
    T = as_matrix(T)
    d_s = A.shape[0]
    if A.shape != (d_s, d_s) or T.shape[0] != d_s:
        raise ValueError(f"incompatible shapes A {A.shape}, T {T.shape}")
    _check_not_one_hot(A)
    basis = left_null_space_basis(augment_ones(T), eps)
    if basis.shape[0] == 0:
        return
    root = [int(x) for x in np.atleast_1d(seed)]
    for i in range(n_samples):
        rng = np.random.default_rng([*root, i])
        coeffs = rng.uniform(-COEFF_RANGE, COEFF_RANGE, size=(d_s, basis.shape[0]))
        raw = coeffs @ basis
        factors = scale_rows_nonnegative(A, raw)
        atilde = raw * factors[:, None]
        logits, rank = reconstruct_logits(A + atilde, "minus_a_hat_1", eps)
        report = check_constraints(A, atilde, T, d_k, eps, logit_rank=rank)
        yield AtildeResult(atilde=atilde, basis_used=basis, coefficients=coeffs * factors[:, None],
                           report=report, reconstructed_logits=logits, reconstructed_rank=rank)


def construct_atilde_softmax(A, T, n_samples: int, seed=0, d_k: int | None = None,
                             eps: float = SINGLE_EPS) -> list[AtildeResult]:
    """Random perturbations keeping ``A + Atilde`` row-stochastic with unchanged output.

    Each row of ``Atilde`` is a random combination (coefficients uniform in
    [-10, 10]) of an orthonormal basis of the left null space of ``[T, 1]``,
    then shrunk so ``A + Atilde >= 0``.  Sample ``i`` draws from
    ``default_rng([seed, i])``.  An empty list means the null space is
    trivial and ``A`` is identifiable.

    Raises
    ------
    OneHotRowError
        If a row of ``A`` has an entry above ``1 - 1e-6``.
    """
    return list(iter_atilde_softmax(A, T, n_samples, seed, d_k, eps))


def softmax_identifiable(T, eps: float = SINGLE_EPS) -> bool:
    return left_null_space_basis(augment_ones(T), eps).shape[0] == 0


def summarize_softmax_samples(results: Sequence[AtildeResult] | Iterator[AtildeResult]) -> dict:
    """Aggregate pass rates and logit ranks over softmax-case samples."""
    n = 0
    counts = {"p1": 0, "p2": 0, "p3": 0, "p4": 0}
    ranks = []
    for r in results:
        n += 1
        rep = r.report
        counts["p1"] += rep.p1_nonneg
        counts["p2"] += rep.p2_nullspace
        counts["p3"] += rep.p3_rowsum
        counts["p4"] += bool(rep.p4_rank)
        ranks.append(r.reconstructed_rank)
    if n == 0:
        return {"n": 0}
    return {"n": n, "mean_rank_A_l": float(np.mean(ranks)), "min_rank_A_l": int(min(ranks)),
            "max_rank_A_l": int(max(ranks)), **{f"{k}_pass_rate": v / n for k, v in counts.items()}}
