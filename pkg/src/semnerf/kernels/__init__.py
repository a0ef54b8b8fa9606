"""Hot-kernel dispatch.

The package runs the numba-jitted kernels by default and falls back to the
pure-numpy reference implementations when numba is unavailable.  The
SEMNERF_BACKEND environment variable overrides the choice:

    SEMNERF_BACKEND=numpy   force the reference path
    SEMNERF_BACKEND=numba   require the jitted path (ImportError if absent)
    SEMNERF_BACKEND=auto    default behavior

Both implementation modules stay importable side by side for the kernel
equivalence tests and for benchmarks/bench_kernels.py.
"""

import os

from . import reference

_choice = os.environ.get("SEMNERF_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(f"SEMNERF_BACKEND must be auto, numba or numpy, got {_choice!r}")

if _choice == "numpy":
    _impl = reference
else:
    try:
        from . import jitted as _impl
    except ImportError:
        if _choice == "numba":
            raise
        _impl = reference

PRIM_SPHERE = reference.PRIM_SPHERE
PRIM_BOX = reference.PRIM_BOX
PRIM_DISC = reference.PRIM_DISC

encode_frequencies = _impl.encode_frequencies
render_weights = _impl.render_weights
render_weights_backward = _impl.render_weights_backward
sample_pdf = _impl.sample_pdf
binary_erode = _impl.binary_erode
binary_dilate = _impl.binary_dilate
raytrace = _impl.raytrace


def active_backend():
    """Name of the kernel set in use: 'numba' or 'numpy'."""
    return _impl.BACKEND_NAME
