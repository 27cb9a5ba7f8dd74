"""capreg: capacity-regularized self-supervised representation learning.

A self-contained training engine (dense-tensor reverse-mode autodiff with
SVD/nuclear-norm support, chart-based multi-head encoders, temporal and
two-view contrastive objectives with a nuclear-norm capacity regularizer)
plus a deterministic synthetic probing benchmark and CLI.
"""

import os as _os

# parallelism comes from the sweep worker pool; keep BLAS single-threaded
# for determinism and honest per-core budgets (best effort: only works if
# numpy has not been imported yet, and never overrides an explicit choice)
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
