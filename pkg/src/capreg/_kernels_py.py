"""Pure-numpy implementations of the hot kernels.

Mirrors the contracts of the compiled ``capreg._core`` extension; selected
by :mod:`capreg.backend` when the extension is unavailable or disabled.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def im2col(x, kh, kw, sh, sw):
    """Gather valid-convolution patches.

    x: (B, C, H, W) -> (B, Ho, Wo, C, kh, kw) contiguous, where
    Ho = floor((H - kh) / sh) + 1 and likewise for Wo.
    """
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))


def col2im(cols, h, w, sh, sw):
    """Scatter-add patch gradients back onto the input grid.

    cols: (B, Ho, Wo, C, kh, kw) -> (B, C, H, W).
    """
    b, ho, wo, c, kh, kw = cols.shape
    dx = np.zeros((b, c, h, w), dtype=cols.dtype)
    src = cols.transpose(0, 3, 1, 2, 4, 5)  # (B, C, Ho, Wo, kh, kw)
    for p in range(kh):
        for q in range(kw):
            dx[:, :, p : p + sh * (ho - 1) + 1 : sh, q : q + sw * (wo - 1) + 1 : sw] += src[
                :, :, :, :, p, q
            ]
    return dx


def jacobi_rows(r, v, pairs, tol, max_sweeps):
    """One-sided Jacobi row orthogonalization, vectorized per round.

    Rotates row pairs of ``r`` (n x m) in place until every pair satisfies
    |<r_i, r_j>| / (|r_i||r_j|) < tol, applying identical rotations to the
    rows of ``v`` (n x n). ``pairs`` is the (rounds, n_pairs, 2) round-robin
    schedule; entries >= n are padding. Returns (sweeps_used, final_off).
    """
    n = r.shape[0]
    off = 0.0
    for sweep in range(max_sweeps):
        off = 0.0
        for rnd in range(pairs.shape[0]):
            ii = pairs[rnd, :, 0]
            jj = pairs[rnd, :, 1]
            keep = (ii < n) & (jj < n)
            if not keep.any():
                continue
            ii = ii[keep]
            jj = jj[keep]
            ri = r[ii]
            rj = r[jj]
            alpha = np.einsum("ij,ij->i", ri, ri)
            beta = np.einsum("ij,ij->i", rj, rj)
            gamma = np.einsum("ij,ij->i", ri, rj)
            den = np.sqrt(alpha * beta)
            ratio = np.zeros_like(den)
            nz = den > 0.0
            ratio[nz] = np.abs(gamma[nz]) / den[nz]
            if ratio.size:
                off = max(off, float(ratio.max()))
            apply = nz & (ratio >= 1e-15)
            if not apply.any():
                continue
            # small-angle (|theta| <= pi/4) rotation zeroing the Gram entry
            tau = np.zeros_like(gamma)
            tau[apply] = (alpha[apply] - beta[apply]) / (2.0 * gamma[apply])
            t = np.where(
                tau == 0.0, 1.0, np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            )
            t = np.where(apply, t, 0.0)
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = (t[:, None]) * c
            r[ii] = c * ri + s * rj
            r[jj] = -s * ri + c * rj
            vi = v[ii]
            vj = v[jj]
            v[ii] = c * vi + s * vj
            v[jj] = -s * vi + c * vj
        if off < tol:
            return sweep + 1, off
    return max_sweeps, off
