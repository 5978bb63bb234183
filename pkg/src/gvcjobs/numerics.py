"""Dense linear algebra and chi-squared tail probabilities.

Everything here works on plain ``numpy`` arrays. The least-squares solver
delegates the column-pivoted QR factorisation to LAPACK (``scipy.linalg.qr``);
the Cholesky-based inverse, the one-sided Jacobi SVD and the incomplete gamma
function are written out here because their failure reporting matters to the
callers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

RANK_TOL = 1e-10
RIDGE_SCALE = 1e-10
SYMMETRY_TOL = 1e-10
JACOBI_TOL = 1e-12
GAMMA_TOL = 1e-12
_GAMMA_MAXITER = 100_000


class NumericalError(ArithmeticError):
    """Raised when a factorisation fails beyond the documented fallbacks."""


class RidgeWarning(RuntimeWarning):
    """Emitted when ``invert_pd`` had to add a ridge to the diagonal."""


@dataclass(frozen=True)
class DecompositionReport:
    kind: str
    rank: int
    condition_estimate: float
    tolerance_used: float
    dropped: tuple[int, ...] = field(default=())

    @property
    def full_rank(self) -> bool:
        return not self.dropped


def solve_least_squares(A, b, tol: float = RANK_TOL):
    """Minimum-residual solution of ``A x = b`` by column-pivoted QR.

    Columns whose pivot falls below ``tol`` times the largest pivot are
    treated as collinear: their coefficients are set to zero and their
    indices are listed in ``report.dropped``.

    Parameters
    ----------
    A : array_like, shape (n, k)
    b : array_like, shape (n,) or (n, m)
        Several right-hand sides may be solved at once.

    Returns
    -------
    x : ndarray, shape (k,) or (k, m)
    report : DecompositionReport
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"A must be a matrix, got shape {A.shape}")
    n, k = A.shape
    if b.shape[0] != n:
        raise ValueError(f"dimension mismatch: A is {A.shape}, b is {b.shape}")
    if n < k:
        raise ValueError(f"need at least as many rows as columns, got {n} < {k}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("A and b must not contain missing or non-finite entries")

    out_shape = (k,) + b.shape[1:]
    if k == 0:
        return np.zeros(out_shape), DecompositionReport("qr", 0, 1.0, tol)

    b2 = b.reshape(n, -1)
    qtb_all, R, piv = _pivoted_qr_apply(A, b2)
    diag = np.abs(np.diag(R))
    largest = diag[0] if diag.size else 0.0
    if largest == 0.0:
        report = DecompositionReport("qr", 0, math.inf, tol, tuple(range(k)))
        return np.zeros(out_shape), report

    rank = int(np.sum(diag > tol * largest))
    x = np.zeros((k, b2.shape[1]))
    qtb = qtb_all[:rank]
    x[piv[:rank]] = scipy.linalg.solve_triangular(R[:rank, :rank], qtb)
    x = x.reshape(out_shape)
    report = DecompositionReport(
        kind="qr",
        rank=rank,
        condition_estimate=float(largest / diag[rank - 1]),
        tolerance_used=tol,
        dropped=tuple(sorted(int(j) for j in piv[rank:])),
    )
    return x, report


def _pivoted_qr_apply(A, C):
    """Pivoted QR of ``A`` returning ``(Q'C, R, piv)`` without forming Q."""
    CtQ, R, piv = scipy.linalg.qr_multiply(A, C.T, mode="right", pivoting=True)
    return CtQ.T, R, piv


def qr_coordinates(A, C, tol: float = RANK_TOL):
    """Coordinates ``Q'C`` of ``C`` in an orthonormal basis ``Q`` of ``A``'s columns.

    Only the leading ``rank`` basis vectors are kept, so the projection of C
    onto the column space of A has the same Gram matrix as the result.
    """
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    k = A.shape[1]
    if k == 0:
        return np.zeros((0,) + C.shape[1:]), DecompositionReport("qr", 0, 1.0, tol)
    C2 = C.reshape(C.shape[0], -1)
    QtC, R, piv = _pivoted_qr_apply(A, C2)
    diag = np.abs(np.diag(R))
    largest = diag[0] if diag.size else 0.0
    rank = int(np.sum(diag > tol * largest)) if largest > 0 else 0
    cond = float(largest / diag[rank - 1]) if rank else math.inf
    report = DecompositionReport("qr", rank, cond, tol, tuple(sorted(int(j) for j in piv[rank:])))
    return QtC[:rank].reshape((rank,) + C.shape[1:]), report


def rank_report(A, tol: float = RANK_TOL, reference: float | None = None) -> DecompositionReport:
    """Numerical rank of ``A`` by column-pivoted QR.

    A pivot counts as zero when it falls below ``tol * reference``; the
    reference defaults to the largest pivot of ``A`` itself.
    """
    A = np.asarray(A, dtype=float)
    k = A.shape[1]
    if k == 0:
        return DecompositionReport("qr", 0, 1.0, tol)
    R, piv = scipy.linalg.qr(A, mode="r", pivoting=True, check_finite=False)
    R = R[: min(R.shape), :]
    diag = np.abs(np.diag(R))
    largest = diag[0] if diag.size else 0.0
    ref = largest if reference is None else reference
    rank = int(np.sum(diag > tol * ref)) if ref > 0 else 0
    cond = float(largest / diag[rank - 1]) if rank else math.inf
    return DecompositionReport("qr", rank, max(cond, 1.0), tol,
                               tuple(sorted(int(j) for j in piv[rank:])))


def _cholesky(A):
    """Lower Cholesky factor, or ``(None, j, pivot)`` at the first bad pivot."""
    k = A.shape[0]
    L = np.zeros_like(A)
    work = A.copy()
    smallest = math.inf
    for j in range(k):
        pivot = work[j, j]
        smallest = min(smallest, pivot)
        if not pivot > 0.0:
            return None, j, pivot
        root = math.sqrt(pivot)
        L[j:, j] = work[j:, j] / root
        work[j + 1:, j + 1:] -= np.outer(L[j + 1:, j], L[j + 1:, j])
    return L, -1, smallest


def _check_symmetric(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"need a square matrix, got shape {A.shape}")
    scale = np.abs(A).max() if A.size else 0.0
    asym = np.abs(A - A.T).max() if A.size else 0.0
    if asym > SYMMETRY_TOL * max(scale, np.finfo(float).tiny):
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return 0.5 * (A + A.T)


def cholesky_pd(A, return_ridge: bool = False):
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    If the factorisation breaks down, a ridge of ``1e-10 * trace(A) / k`` is
    added to the diagonal once and a :class:`RidgeWarning` is issued. A second
    breakdown raises :class:`NumericalError` naming the offending pivot.
    """
    A = _check_symmetric(A)
    k = A.shape[0]
    ridge = 0.0
    L, j, pivot = _cholesky(A)
    if L is None:
        ridge = RIDGE_SCALE * np.trace(A) / k
        warnings.warn(
            f"matrix not positive definite at pivot {j} ({pivot:.3e}); "
            f"added ridge {ridge:.3e} to the diagonal",
            RidgeWarning,
            stacklevel=2,
        )
        L, j, pivot = _cholesky(A + ridge * np.eye(k))
        if L is None:
            raise NumericalError(
                f"matrix is indefinite after ridge {ridge:.3e}: "
                f"pivot {j} is {pivot:.6e}"
            )
    if return_ridge:
        return L, ridge
    return L


def invert_pd(A, return_ridge: bool = False):
    """Inverse of a symmetric positive-definite matrix via :func:`cholesky_pd`."""
    L, ridge = cholesky_pd(A, return_ridge=True)
    k = L.shape[0]
    Linv = scipy.linalg.solve_triangular(L, np.eye(k), lower=True)
    inv = Linv.T @ Linv
    inv = 0.5 * (inv + inv.T)
    if return_ridge:
        return inv, ridge
    return inv


def svd_jacobi(A, tol: float = JACOBI_TOL, max_sweeps: int = 100):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``U`` (m, n), singular values ``s`` (n,) in descending order and
    ``Vt`` (n, n) with ``A = U @ diag(s) @ Vt``. Columns of ``U`` belonging to
    zero singular values are left as zero vectors.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or min(A.shape) < 1:
        raise ValueError(f"need a non-empty matrix, got shape {A.shape}")
    m, n = A.shape
    W = A.copy()
    V = np.eye(n)
    norm2 = float(np.sum(A * A))
    if norm2 == 0.0:
        return np.zeros((m, n)), np.zeros(n), np.eye(n)

    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = W[:, p] @ W[:, p]
                beta = W[:, q] @ W[:, q]
                gamma = W[:, p] @ W[:, q]
                off += gamma * gamma
                if gamma == 0.0:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wp = W[:, p].copy()
                W[:, p] = c * wp - s * W[:, q]
                W[:, q] = s * wp + c * W[:, q]
                vp = V[:, p].copy()
                V[:, p] = c * vp - s * V[:, q]
                V[:, q] = s * vp + c * V[:, q]
        if math.sqrt(off) < tol * norm2:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sv = np.sqrt(np.sum(W * W, axis=0))
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    W = W[:, order]
    V = V[:, order]
    U = np.zeros((m, n))
    nz = sv > 0.0
    U[:, nz] = W[:, nz] / sv[nz]
    return U, sv, V.T


def singular_values(A):
    """Singular values of ``A`` (one per column), descending."""
    return svd_jacobi(A)[1]


def _gamma_series(a: float, x: float) -> float:
    # Lower regularised incomplete gamma P(a, x), valid for x < a + 1.
    if x == 0.0:
        return 0.0
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_GAMMA_MAXITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * GAMMA_TOL:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise NumericalError(f"incomplete gamma series did not converge (a={a}, x={x})")


def _gamma_cf(a: float, x: float) -> float:
    # Upper regularised incomplete gamma Q(a, x) by modified Lentz, x >= a + 1.
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAXITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < GAMMA_TOL:
            return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    raise NumericalError(f"incomplete gamma fraction did not converge (a={a}, x={x})")


def _check_chi2_args(x, dof):
    x = float(x)
    if math.isnan(x):
        raise ValueError("x must not be NaN")
    if x < 0.0:
        raise ValueError(f"chi-squared argument must be non-negative, got {x}")
    if dof < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {dof}")
    return x, 0.5 * float(dof)


def chi2_sf(x, dof) -> float:
    """Upper-tail probability ``P(X > x)`` for ``X ~ chi2(dof)``."""
    x, a = _check_chi2_args(x, dof)
    if math.isinf(x):
        return 0.0
    h = 0.5 * x
    if h < a + 1.0:
        return 1.0 - _gamma_series(a, h)
    return _gamma_cf(a, h)


def chi2_cdf(x, dof) -> float:
    """Lower-tail probability ``P(X <= x)`` for ``X ~ chi2(dof)``."""
    x, a = _check_chi2_args(x, dof)
    if math.isinf(x):
        return 1.0
    h = 0.5 * x
    if h < a + 1.0:
        return _gamma_series(a, h)
    return 1.0 - _gamma_cf(a, h)


def normal_two_sided_p(z: float) -> float:
    """Two-sided standard normal p-value for statistic ``z``."""
    return math.erfc(abs(z) / math.sqrt(2.0))
