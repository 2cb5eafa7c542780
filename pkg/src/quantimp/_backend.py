"""Numba/numpy backend selection for the hot kernels.

The recurrent kernels in :mod:`quantimp.kernels` are written once, in a
numba-compilable subset of numpy. By default they are JIT-compiled whenever
numba can be imported. Setting ``QUANTIMP_BACKEND=numpy`` forces the pure
numpy interpretation of the same source (useful for debugging and as a
dependency-light fallback); ``QUANTIMP_BACKEND=numba`` demands the JIT and
fails loudly if numba is missing. ``benchmarks/bench_backends.py`` compares
the two paths.
"""

import os

ENV_VAR = "QUANTIMP_BACKEND"


def _resolve():
    choice = os.environ.get(ENV_VAR, "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"{ENV_VAR} must be one of auto|numba|numpy, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy", None
    try:
        import numba
    except ImportError:
        if choice == "numba":
            raise ImportError(f"{ENV_VAR}=numba but numba is not installed")
        return "numpy", None
    return "numba", numba


BACKEND, _numba = _resolve()


def jit(func):
    """Apply ``@njit`` when the numba backend is active, else pass through.

    fastmath stays off: bit-for-bit run-to-run reproducibility is part of
    the package contract.
    """
    if BACKEND == "numba":
        return _numba.njit(cache=True)(func)
    return func
