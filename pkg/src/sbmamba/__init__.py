"""Bridge-based generative speech enhancement with a selective state-space backbone."""

import os as _os

# single-threaded math by default so runs are bit-reproducible
_threads = _os.environ.get("SBM_NUM_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
