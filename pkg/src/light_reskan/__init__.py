"""Light-ResKAN: Gram-polynomial KAN convolutions with channel-shared activations."""

import os as _os

# BLAS reads its thread count once, at load time, so this must precede any numpy import.
_threads = _os.environ.get("LIGHT_RESKAN_THREADS", "0").strip()
if _threads not in ("", "0"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS"):
        _os.environ[_var] = _threads

__version__ = "0.1.0"
