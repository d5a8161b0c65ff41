"""Kernel backend selection.

Hot numeric loops (convolution, thresholding, pooling, NMS) exist twice:
a numba @njit version and a pure-numpy version.  `QSP_BACKEND` picks one:

    QSP_BACKEND=auto    use numba when importable (default)
    QSP_BACKEND=numba   require numba, fail loudly if missing
    QSP_BACKEND=numpy   force the pure-numpy path

`QSP_THREADS` caps the numba thread pool.  Both paths are exact for
integer-valued data, so the choice never affects lowered-graph results.
"""

import os

_CHOICE = os.environ.get("QSP_BACKEND", "auto").strip().lower()
if _CHOICE not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"QSP_BACKEND must be auto|numba|numpy, got {_CHOICE!r}")

_NUMBA_OK = False
if _CHOICE in ("auto", "numba"):
    try:
        import numba  # noqa: F401

        _NUMBA_OK = True
    except ImportError:
        if _CHOICE == "numba":
            raise
        _NUMBA_OK = False

if _NUMBA_OK:
    threads = os.environ.get("QSP_THREADS")
    if threads:
        import numba

        numba.set_num_threads(max(1, int(threads)))


def use_numba() -> bool:
    return _NUMBA_OK


def backend_name() -> str:
    return "numba" if _NUMBA_OK else "numpy"
