"""Federated cache-adapter fine-tuning over a frozen zero-shot head.

The package is organized as thin layers: dense kernels (``numerics``),
feature datasets and the CFF1 file format (``features``), the key-value
cache adapter (``cache_model``), client data partitioning (``partition``),
the federated round loop (``federation``), a convergence-rate
certification lab on synthetic strongly convex objectives
(``convergence``), experiment bookkeeping (``reporting``), and a CLI
(``cli``).
"""

import os as _os

# Reruns must be byte-identical, so BLAS thread pools are pinned before
# numpy is first imported through this package. Explicit user settings win.
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")
del _os, _var

__version__ = "0.1.0"
