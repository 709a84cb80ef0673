"""Negative spectra: eigenvalue counting by inertia, eigensolves, eigenvalue sums."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import (DiscreteOperator, Field, build_operator, channel_alpha,
                   channel_multiplicity)

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000
LDL_DENSE_LIMIT = 3000
NEAR_EIG_TOL = 1e-10
PERTURB = 1e-9


class EigenSolverError(RuntimeError):
    """Eigensolver failed to deliver a certified-complete result."""


@dataclass(frozen=True)
class CountCertificate:
    """Number of eigenvalues strictly below ``lam``."""

    lam: float
    count: int
    method: str
    perturbed: bool = False
    lam_used: float | None = None


@dataclass(frozen=True)
class EigenResult:
    """All eigenpairs below ``threshold``; ``vectors`` are field values (columns)."""

    eigenvalues: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    threshold: float
    op: DiscreteOperator | None = None

    def __len__(self) -> int:
        return len(self.eigenvalues)

    def field(self, k: int) -> Field:
        return Field(self.op.domain, self.vectors[:, k])


# -- factorization kernels ----------------------------------------------------

@numba.njit(cache=True)
def _sturm_kernel(diag, off, lam, tiny):
    n = diag.shape[0]
    count = 0
    dmin = np.inf
    d = 1.0
    for k in range(n):
        if k == 0:
            d = diag[0] - lam
        else:
            d = diag[k] - lam - off[k - 1] * off[k - 1] / d
        if abs(d) < dmin:
            dmin = abs(d)
        if d == 0.0:
            d = tiny
        if d < 0.0:
            count += 1
    return count, dmin


@numba.njit(cache=True)
def _band_ldl_kernel(ab, lam):
    """In-place LDL^T of a symmetric band matrix (lower storage, no pivoting)."""
    b = ab.shape[0] - 1
    n = ab.shape[1]
    count = 0
    dmin = np.inf
    dmax = 0.0
    l = np.empty(b + 1)
    for j in range(n):
        d = ab[0, j] - lam
        ad = abs(d)
        if ad < dmin:
            dmin = ad
        if ad > dmax:
            dmax = ad
        if d == 0.0:
            return count, 0.0, dmax
        if d < 0.0:
            count += 1
        m = min(b, n - 1 - j)
        for i in range(1, m + 1):
            l[i] = ab[i, j] / d
        for i in range(1, m + 1):
            li_d = l[i] * d
            for k in range(i, m + 1):
                ab[k - i, j + i] -= l[k] * li_d
    return count, dmin, dmax


def _as_matrix(A):
    if isinstance(A, DiscreteOperator):
        return A.matrix
    return A


def _is_tridiagonal(M) -> bool:
    if sp.issparse(M):
        coo = M.tocoo()
        return bool(coo.nnz == 0 or np.max(np.abs(coo.row - coo.col)) <= 1)
    M = np.asarray(M)
    return bool(np.allclose(np.triu(M, 2), 0.0) and np.allclose(np.tril(M, -2), 0.0))


def _matrix_norm(M) -> float:
    if sp.issparse(M):
        return float(abs(M).sum(axis=1).max()) if M.shape[0] else 0.0
    return float(np.abs(M).sum(axis=1).max()) if M.shape[0] else 0.0


def _count_sturm(M, lam):
    if sp.issparse(M):
        diag = M.diagonal().astype(float)
        off = M.diagonal(1).astype(float) if M.shape[0] > 1 else np.zeros(0)
    else:
        M = np.asarray(M, dtype=float)
        diag, off = np.diag(M).copy(), np.diag(M, 1).copy()
    norm = max(_matrix_norm(M), 1.0)
    return _sturm_kernel(diag, off, float(lam), 1e-300 * norm)


def _count_band(M, lam):
    M = sp.csr_matrix(M)
    coo = M.tocoo()
    b = int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0
    n = M.shape[0]
    ab = np.zeros((b + 1, n))
    low = coo.row >= coo.col
    ab[coo.row[low] - coo.col[low], coo.col[low]] = coo.data[low]
    count, dmin, dmax = _band_ldl_kernel(ab, float(lam))
    return count, dmin, dmax


def _count_bunch_kaufman(M, lam):
    A = M.toarray() if sp.issparse(M) else np.array(M, dtype=float)
    A = A - lam * np.eye(A.shape[0])
    _, D, _ = sla.ldl(A, lower=True)
    # D is block diagonal with 1x1 and 2x2 blocks
    ev = np.linalg.eigvalsh(D)
    return int(np.sum(ev < 0)), float(np.min(np.abs(ev))) if ev.size else np.inf


def _count_dense(M, lam):
    A = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
    return int(np.sum(np.linalg.eigvalsh(A) < lam))


def count_below(A, lam: float, method: str | None = None) -> CountCertificate:
    """Number of eigenvalues of the symmetric ``A`` strictly below ``lam``.

    The default method is a Sturm sequence for tridiagonal matrices and the
    inertia of an ``LDL^T`` factorization of ``A - lam I`` otherwise (banded
    without pivoting for large sparse matrices, Bunch-Kaufman for small ones).
    When a pivot smaller than ``1e-10 ||A||`` shows up, ``lam`` is moved by
    ``+1e-9 ||A||`` and the certificate records it.  A banded factorization
    that breaks down falls back to a dense eigensolve.
    """
    M = _as_matrix(A)
    n = M.shape[0]
    if n == 0:
        return CountCertificate(lam, 0, method or "dense")
    norm = max(_matrix_norm(M), 1e-300)
    if method is None:
        method = "sturm" if _is_tridiagonal(M) else "inertia"
    if method == "dense":
        return CountCertificate(lam, _count_dense(M, lam), "dense")
    if method not in ("sturm", "inertia"):
        raise ValueError(f"unknown counting method {method!r}")
    if method == "sturm" and not _is_tridiagonal(M):
        raise ValueError("Sturm counting needs a tridiagonal matrix")

    lam_used, perturbed = float(lam), False
    for _ in range(2):
        if method == "sturm":
            count, dmin = _count_sturm(M, lam_used)
            ok = True
        elif n <= LDL_DENSE_LIMIT:
            count, dmin = _count_bunch_kaufman(M, lam_used)
            ok = True
        else:
            count, dmin, dmax = _count_band(M, lam_used)
            ok = dmin > 0 and dmax < 1e12 * norm
        if ok and dmin >= NEAR_EIG_TOL * norm:
            return CountCertificate(lam, int(count), method, perturbed, lam_used)
        if perturbed:
            break
        lam_used, perturbed = float(lam) + PERTURB * norm, True
    if ok:
        return CountCertificate(lam, int(count), method, perturbed, lam_used)
    log.warning("factorization broke down at lam=%g; dense fallback", lam)
    return CountCertificate(lam, _count_dense(M, lam_used), "dense", perturbed, lam_used)


# -- eigensolves --------------------------------------------------------------

def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    for k in range(vecs.shape[1]):
        s = vecs[:, k].sum()
        if abs(s) < 1e-12 * np.abs(vecs[:, k]).sum():
            s = vecs[np.argmax(np.abs(vecs[:, k]) > 1e-8 * np.abs(vecs[:, k]).max()), k]
        if s < 0:
            vecs[:, k] = -vecs[:, k]
    return vecs


def _pack(op: DiscreteOperator, lam: np.ndarray, vecs: np.ndarray, tau: float) -> EigenResult:
    order = np.argsort(lam, kind="stable")
    lam, vecs = lam[order], _fix_signs(vecs[:, order])
    res = np.linalg.norm(op.matrix @ vecs - vecs * lam, axis=0) if lam.size else np.zeros(0)
    return EigenResult(lam, op.to_values(vecs).reshape(op.domain.size, -1), res, tau, op)


def eigs_below(op: DiscreteOperator, tau: float = 0.0, max_rounds: int = 8) -> EigenResult:
    """All eigenpairs of ``op`` below ``tau``, completeness certified by inertia."""
    n = op.size
    expected = count_below(op, tau)
    K = expected.count
    if K == 0:
        return EigenResult(np.zeros(0), np.zeros((op.domain.size, 0)), np.zeros(0), tau, op)
    if n <= DENSE_LIMIT or K > n // 3:
        lam, vecs = sla.eigh(op.matrix.toarray())
        sel = lam < (expected.lam_used if expected.perturbed else tau)
        lam, vecs = lam[sel], vecs[:, sel]
    else:
        k = min(K + max(4, K // 10), n - 2)
        lu = spla.splu((op.matrix - tau * sp.identity(n)).tocsc())
        inv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
        for _ in range(max_rounds):
            lam, vecs = spla.eigsh(op.matrix, k=k, sigma=tau, which="LM", OPinv=inv,
                                   v0=np.ones(n), tol=0)
            sel = lam < tau
            if sel.sum() >= K or k >= n - 2:
                break
            k = min(2 * k, n - 2)
        lam, vecs = lam[sel], vecs[:, sel]
    if lam.size != K:
        raise EigenSolverError(f"found {lam.size} eigenvalues below {tau}, inertia says {K}")
    return _pack(op, lam, vecs, tau)


def neg_sum(res: EigenResult, p: float) -> float:
    """``sum |lambda_n|^p`` over the negative eigenvalues of ``res``."""
    if res.threshold != 0:
        raise ValueError("eigenvalue sums need an EigenResult with threshold 0")
    if p <= 0:
        raise ValueError("p must be positive")
    neg = res.eigenvalues[res.eigenvalues < 0]
    return float(np.sum(np.abs(neg) ** p))


def _tridiagonal_lowest(M, k: int, vectors: bool):
    diag = M.diagonal().astype(float)
    off = M.diagonal(1).astype(float)
    if vectors:
        return sla.eigh_tridiagonal(diag, off, select="i", select_range=(0, k - 1))
    return sla.eigh_tridiagonal(diag, off, eigvals_only=True, select="i", select_range=(0, k - 1))


def lowest_eigenvalues(op: DiscreteOperator, k: int = 1) -> np.ndarray:
    """The ``k`` lowest eigenvalues (tridiagonal QR, dense, or shift-invert)."""
    n = op.size
    k = min(k, n)
    if n > 1 and _is_tridiagonal(op.matrix):
        return _tridiagonal_lowest(op.matrix, k, False)
    if n <= DENSE_LIMIT:
        return sla.eigh(op.matrix.toarray(), eigvals_only=True, subset_by_index=(0, k - 1))
    sigma = op.gershgorin_lower - 1.0
    lam = spla.eigsh(op.matrix, k=k, sigma=sigma, which="LM", v0=np.ones(n),
                     return_eigenvectors=False, tol=0)
    return np.sort(lam)


def ground_state(op: DiscreteOperator, gap_tol: float = 1e-10):
    """Lowest eigenvalue and its eigenvector as a field, sign-fixed to ``sum > 0``.

    A degenerate lowest eigenvalue is logged; the solver's vector is kept
    after sign fixing, which is deterministic for a fixed node ordering.
    """
    n = op.size
    k = min(2, n)
    if n > 2 and _is_tridiagonal(op.matrix):
        lam, vecs = _tridiagonal_lowest(op.matrix, k, True)
    elif n <= DENSE_LIMIT:
        lam, vecs = sla.eigh(op.matrix.toarray(), subset_by_index=(0, k - 1))
    else:
        sigma = op.gershgorin_lower - 1.0
        lam, vecs = spla.eigsh(op.matrix, k=k, sigma=sigma, which="LM", v0=np.ones(n), tol=0)
        order = np.argsort(lam)
        lam, vecs = lam[order], vecs[:, order]
    if k == 2 and lam[1] - lam[0] < gap_tol:
        log.warning("degenerate ground state: gap %.3g", lam[1] - lam[0])
    v = _fix_signs(vecs[:, :1].copy())[:, 0]
    return float(lam[0]), op.to_field(v)


def count_radial_channels(V: Field, lam: float = 0.0, sign: int = -1, lmax: int = 200) -> int:
    """Count of ``-Delta + sign V`` below ``lam`` for radial ``V`` summed over all channels."""
    dom = V.domain
    if dom.kind != "radial":
        raise ValueError("needs a radial field")
    total = 0
    for l in range(lmax + 1):
        op = build_operator(dom, V, sign, centrifugal=channel_alpha(dom.dim, l))
        c = count_below(op, lam).count
        if c == 0:
            break
        total += channel_multiplicity(dom.dim, l) * c
    return total
