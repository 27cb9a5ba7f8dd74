"""Kernel backend selection.

The hot kernels (conv patch packing, Jacobi SVD sweeps) exist twice: a
compiled Cython core (``capreg._core``) and a pure-numpy fallback
(``capreg._kernels_py``). The compiled core is used when importable;
set ``CAPREG_BACKEND=python`` or ``CAPREG_BACKEND=cython`` to force one.
"""

import os

from . import _kernels_py

_FORCED = os.environ.get("CAPREG_BACKEND", "").strip().lower()

if _FORCED == "python":
    _impl = _kernels_py
elif _FORCED == "cython":
    from . import _core as _impl  # noqa: F401  (ImportError is intentional here)
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _kernels_py

NAME = _impl.NAME


def backend_name():
    return NAME


def get_impl(name=None):
    """Return a kernel namespace by name (both, for parity tests/benchmarks)."""
    if name in (None, NAME):
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")


def im2col(x, kh, kw, sh, sw):
    return _impl.im2col(x, kh, kw, sh, sw)


def col2im(cols, h, w, sh, sw):
    return _impl.col2im(cols, h, w, sh, sw)


def jacobi_rows(r, v, pairs, tol, max_sweeps):
    return _impl.jacobi_rows(r, v, pairs, tol, max_sweeps)


def tournament_pairs(n):
    """Round-robin pairing schedule shared by all Jacobi implementations.

    Returns an int64 array (rounds, ceil(n/2), 2); indices >= n are padding
    produced by the circle method on an odd player count.
    """
    import numpy as np

    players = n if n % 2 == 0 else n + 1
    if players < 2:
        return np.zeros((0, 0, 2), dtype=np.int64)
    others = list(range(1, players))
    rounds = []
    for _ in range(players - 1):
        order = [0] + others
        pairs = [
            (order[k], order[players - 1 - k]) for k in range(players // 2)
        ]
        rounds.append(pairs)
        others = others[-1:] + others[:-1]
    return np.asarray(rounds, dtype=np.int64)
