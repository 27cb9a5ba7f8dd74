"""Singular value decomposition via one-sided Jacobi on the smaller side.

Always computed in 64-bit. The row-orthogonalization sweep is a backend
kernel (compiled or numpy); this module handles transposition so the
sweep always runs on the smaller dimension, plus sorting, normalization,
and orthonormal completion of null directions.
"""

import numpy as np

from .. import backend
from .tensor import ShapeError

__all__ = ["svd_f64", "svd", "SvdConvergenceError", "JACOBI_TOL", "JACOBI_MAX_SWEEPS"]

JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 60


class SvdConvergenceError(RuntimeError):
    """Jacobi sweeps did not reach the off-diagonal tolerance."""


def svd_f64(m):
    """Thin SVD of a rank-2 array: m = U @ diag(s) @ V.T.

    Returns float64 (U, s, V) with s sorted descending and U, V holding
    orthonormal columns (null directions completed deterministically).
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"svd: expects rank-2, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError("svd: non-finite entries")
    if m.shape[0] >= m.shape[1]:
        return _svd_tall(m.astype(np.float64))
    u, s, v = _svd_tall(m.T.astype(np.float64))
    return v, s, u


def _svd_tall(x):
    p, q = x.shape
    r = np.ascontiguousarray(x.T)  # rows of r are columns of x
    w = np.eye(q)
    pairs = backend.tournament_pairs(q)
    sweeps, off = backend.jacobi_rows(r, w, pairs, JACOBI_TOL, JACOBI_MAX_SWEEPS)
    if off >= JACOBI_TOL:
        raise SvdConvergenceError(
            f"jacobi svd on {p}x{q} did not converge in {sweeps} sweeps; "
            f"off-diagonal residual {off:.3e}"
        )
    s = np.sqrt((r * r).sum(axis=1))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    r = r[order]
    w = w[order]

    smax = s[0] if q else 0.0
    cut = max(p, q) * np.finfo(np.float64).eps * smax
    cols = []
    null_idx = []
    for i in range(q):
        if s[i] > cut:
            cols.append(r[i] / s[i])
        else:
            cols.append(None)
            null_idx.append(i)
    if null_idx:
        _complete_basis(cols, null_idx, p)
    u = np.stack(cols, axis=1)
    return u, s, w.T


def _complete_basis(cols, null_idx, p):
    """Fill null columns with canonical-basis vectors orthogonalized against
    the existing columns (deterministic; double Gram-Schmidt)."""
    have = [c for c in cols if c is not None]
    k = 0
    for i in null_idx:
        while k < p:
            e = np.zeros(p)
            e[k] = 1.0
            k += 1
            for _ in range(2):
                for c in have:
                    e = e - (c @ e) * c
            norm = np.sqrt(e @ e)
            if norm > 0.5:
                e /= norm
                cols[i] = e
                have.append(e)
                break
        else:  # pragma: no cover - cannot happen for p >= q
            raise SvdConvergenceError("orthonormal completion exhausted the basis")


def svd(tensor):
    """Tape-facing SVD: returns (U, s, V) as non-differentiable constants."""
    u, s, v = svd_f64(tensor.data)
    tape = tensor.tape
    return tape.constant(u), tape.constant(s), tape.constant(v)
