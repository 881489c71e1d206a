"""Sparse iterative solver and dense eigensolver.

``solve`` is a right-preconditioned BiCGStab with Jacobi scaling: right
preconditioning keeps the reported residual equal to the true relative
residual ||Ax - b|| / ||b||. ``dense_spectrum`` materializes a matrix-free
operator column by column and computes all eigenvalues with an in-repo
balanced Hessenberg reduction followed by Francis double-shift QR iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from .operators import SparseSystem


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    grid: str = ""
    bc: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("real,imag\n")
            for lam in self.eigenvalues:
                fh.write(f"{lam.real!r},{lam.imag!r}\n")


def solve(system: Union[SparseSystem, sp.spmatrix],
          rhs: Optional[np.ndarray] = None,
          tol: float = 1e-10,
          max_iter: int = 20000,
          x0: Optional[np.ndarray] = None,
          stall_window: int = 300) -> tuple[np.ndarray, SolveReport]:
    """BiCGStab with Jacobi preconditioning.

    Residuals are measured as ||Ax - b||_2 / ||b||_2, absolute when b = 0.
    The recurrence residual is replaced by the true residual every 64
    iterations to bound drift; the iteration stops early when the best
    residual has not improved for ``stall_window`` iterations. On breakdown,
    stagnation, or non-convergence the best iterate seen is returned with
    ``converged=False``.
    """
    if isinstance(system, SparseSystem):
        A = system.matrix
        b = system.bc_rhs if rhs is None else rhs
    else:
        A = system
        if rhs is None:
            raise ValueError("rhs required with a bare matrix")
        b = rhs
    n = A.shape[0]
    if A.shape[0] != A.shape[1] or b.shape != (n,):
        raise ValueError("system must be square and match the rhs")

    diag = A.diagonal()
    inv_diag = np.where(np.abs(diag) > 0, 1.0 / np.where(diag != 0, diag, 1.0), 1.0)

    bnorm = float(np.linalg.norm(b))
    ref = bnorm if bnorm > 0 else 1.0

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    res = float(np.linalg.norm(b - A @ x)) / ref
    best_x, best_res = x.copy(), res
    it_total = 0
    if res <= tol:
        return x, SolveReport(0, res, True)

    while it_total < max_iter:
        # (re)start from the best iterate; restarts break BiCGStab
        # stagnation by resetting the shadow residual
        x = best_x.copy()
        r = b - A @ x
        r0 = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros(n)
        p = np.zeros(n)
        best_it = it_total
        stalled = False

        while it_total < max_iter:
            it_total += 1
            rho_new = float(r0 @ r)
            if rho_new == 0.0 or omega == 0.0:
                stalled = True
                break
            beta = (rho_new / rho) * (alpha / omega)
            rho = rho_new
            p = r + beta * (p - omega * v)
            ph = inv_diag * p
            v = A @ ph
            denom = float(r0 @ v)
            if denom == 0.0:
                stalled = True
                break
            alpha = rho / denom
            s = r - alpha * v
            if float(np.linalg.norm(s)) / ref <= tol:
                x = x + alpha * ph
                res = float(np.linalg.norm(b - A @ x)) / ref
                if res < best_res:
                    best_x, best_res, best_it = x.copy(), res, it_total
                if res <= tol:
                    return x, SolveReport(it_total, res, True)
                r = b - A @ x
                continue
            sh = inv_diag * s
            t = A @ sh
            tt = float(t @ t)
            if tt == 0.0:
                stalled = True
                break
            omega = float(t @ s) / tt
            x = x + alpha * ph + omega * sh
            r = s - omega * t
            res = float(np.linalg.norm(r)) / ref
            if res <= tol or (it_total % 64) == 0:
                r = b - A @ x
                res = float(np.linalg.norm(r)) / ref
            if res < best_res:
                best_x, best_res, best_it = x.copy(), res, it_total
                if res <= tol:
                    return x, SolveReport(it_total, res, True)
            if it_total - best_it > stall_window:
                stalled = True
                break
        if not stalled:
            break
        if it_total - best_it > 3 * stall_window:
            break  # restarts are not helping

    final = float(np.linalg.norm(b - A @ best_x)) / ref
    return best_x, SolveReport(it_total, final, final <= tol)


# ----------------------------------------------------------------------
# dense eigensolver
# ----------------------------------------------------------------------

def _balance(A: np.ndarray, radix: float = 2.0) -> np.ndarray:
    """Parlett-Reinsch diagonal balancing (similarity transform)."""
    A = A.copy()
    n = A.shape[0]
    done = False
    while not done:
        done = True
        for i in range(n):
            c = np.sum(np.abs(A[:, i])) - np.abs(A[i, i])
            r = np.sum(np.abs(A[i, :])) - np.abs(A[i, i])
            if c == 0.0 or r == 0.0:
                continue
            f = 1.0
            s = c + r
            while c < r / radix:
                c *= radix
                r /= radix
                f *= radix
            while c >= r * radix:
                c /= radix
                r *= radix
                f /= radix
            if (c + r) < 0.95 * s:
                done = False
                A[i, :] /= f
                A[:, i] *= f
    return A


def _hessenberg(A: np.ndarray) -> np.ndarray:
    """Householder reduction to upper Hessenberg form."""
    H = A.copy()
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k]
        normx = np.linalg.norm(x)
        if normx == 0.0:
            continue
        v = x.copy()
        v[0] += np.copysign(normx, x[0] if x[0] != 0 else 1.0)
        vn = np.linalg.norm(v)
        if vn == 0.0:
            continue
        v /= vn
        H[k + 1:, k:] -= 2.0 * np.outer(v, v @ H[k + 1:, k:])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v)
        H[k + 2:, k] = 0.0
    return H


def _eig2x2(a, b, c, d):
    tr = a + d
    det = a * d - b * c
    disc = 0.25 * tr * tr - det
    if disc >= 0.0:
        s = np.sqrt(disc)
        return complex(0.5 * tr + s), complex(0.5 * tr - s)
    s = np.sqrt(-disc)
    return complex(0.5 * tr, s), complex(0.5 * tr, -s)


def _francis_sweep(H, lo, hi, exceptional):
    """One implicit double-shift bulge chase on the active block [lo, hi].

    Updates are restricted to the active block (eigenvalues-only variant:
    the block-triangular structure keeps the spectrum intact).
    """
    if exceptional:
        # stall breaker: repeated real shift built from subdiagonal sizes
        mu = H[hi, hi] + abs(H[hi, hi - 1]) + \
            (abs(H[hi - 1, hi - 2]) if hi - 2 >= lo else 0.0)
        s = 2.0 * mu
        t = mu * mu
    else:
        s = H[hi - 1, hi - 1] + H[hi, hi]
        t = H[hi - 1, hi - 1] * H[hi, hi] - H[hi - 1, hi] * H[hi, hi - 1]
    x = H[lo, lo] * H[lo, lo] + H[lo, lo + 1] * H[lo + 1, lo] - s * H[lo, lo] + t
    y = H[lo + 1, lo] * (H[lo, lo] + H[lo + 1, lo + 1] - s)
    z = H[lo + 2, lo + 1] * H[lo + 1, lo]
    for k in range(lo, hi):
        u = np.array([x, y, z]) if k < hi - 1 else np.array([x, y])
        normu = np.linalg.norm(u)
        if normu != 0.0:
            v = u.copy()
            v[0] += np.copysign(normu, u[0] if u[0] != 0 else 1.0)
            vn = np.linalg.norm(v)
            if vn != 0.0:
                v /= vn
                m = k + u.size
                r0 = max(lo, k - 1)
                H[k:m, r0:hi + 1] -= 2.0 * np.outer(v, v @ H[k:m, r0:hi + 1])
                r1 = min(k + 3, hi) + 1
                H[lo:r1, k:m] -= 2.0 * np.outer(H[lo:r1, k:m] @ v, v)
        if k < hi - 1:
            x = H[k + 1, k]
            y = H[k + 2, k]
            z = H[k + 3, k] if k + 3 <= hi else 0.0


def _qr_eigvals(H: np.ndarray, max_sweeps_per_eig: int = 60) -> np.ndarray:
    """Eigenvalues of an upper Hessenberg matrix by shifted QR with
    deflation."""
    H = H.copy()
    n = H.shape[0]
    eigs: list[complex] = []
    hi = n - 1
    sweeps = 0
    budget = max_sweeps_per_eig * max(n, 1)
    while hi >= 0 and sweeps <= budget:
        # deflate tiny subdiagonals
        for i in range(hi, 0, -1):
            if abs(H[i, i - 1]) <= np.finfo(float).eps * (
                    abs(H[i, i]) + abs(H[i - 1, i - 1])) + 1e-300:
                H[i, i - 1] = 0.0
        if hi == 0 or H[hi, hi - 1] == 0.0:
            eigs.append(complex(H[hi, hi]))
            hi -= 1
            continue
        if hi == 1 or H[hi - 1, hi - 2] == 0.0:
            l1, l2 = _eig2x2(H[hi - 1, hi - 1], H[hi - 1, hi],
                             H[hi, hi - 1], H[hi, hi])
            eigs.extend([l1, l2])
            hi -= 2
            continue
        lo = hi
        while lo > 0 and H[lo, lo - 1] != 0.0:
            lo -= 1
        if hi - lo == 1:
            l1, l2 = _eig2x2(H[lo, lo], H[lo, hi], H[hi, lo], H[hi, hi])
            eigs.extend([l1, l2])
            hi -= 2
            continue
        exceptional = (sweeps % 31) == 30
        _francis_sweep(H, lo, hi, exceptional)
        sweeps += 1
    if hi >= 0 and len(eigs) < n:
        # stalled: fall back to remaining diagonal blocks as-is
        i = hi
        while i >= 0:
            if i > 0 and H[i, i - 1] != 0.0:
                l1, l2 = _eig2x2(H[i - 1, i - 1], H[i - 1, i],
                                 H[i, i - 1], H[i, i])
                eigs.extend([l1, l2])
                i -= 2
            else:
                eigs.append(complex(H[i, i]))
                i -= 1
    return np.array(eigs[::-1], dtype=np.complex128)


def eigenvalues_dense(A: np.ndarray) -> np.ndarray:
    """All eigenvalues of a dense real matrix (balance + Hessenberg + QR)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("square matrix required")
    n = A.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.complex128)
    if n == 1:
        return A[0, 0].astype(np.complex128).reshape(1)
    B = _balance(A)
    H = _hessenberg(B)
    return _qr_eigvals(H)


def dense_spectrum(op: Union[Callable, np.ndarray], dim: int,
                   max_dim: int = 4096, grid: str = "", bc: str = ""
                   ) -> SpectrumReport:
    """Materialize a matrix-free operator on the canonical basis and return
    its full spectrum."""
    if dim > max_dim:
        raise ValueError(f"operator dimension {dim} above cap {max_dim}")
    if callable(op):
        cols = np.empty((dim, dim))
        e = np.zeros(dim)
        for j in range(dim):
            e[j] = 1.0
            cols[:, j] = op(e)
            e[j] = 0.0
        A = cols
    else:
        A = np.asarray(op, dtype=np.float64)
        if A.shape != (dim, dim):
            raise ValueError("matrix shape does not match dim")
    lam = eigenvalues_dense(A)
    order = np.lexsort((lam.imag, lam.real))
    return SpectrumReport(lam[order], grid=grid, bc=bc)
