"""Cross-modal cache-model adapter engine operating on embedding bundles."""

import os

# Cap BLAS parallelism before numpy is first imported by any submodule.
# Has no effect if numpy was already loaded by the host process.
_threads = os.environ.get("XMADAPTER_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
