"""Compositing kernel backend selection.

Two interchangeable implementations exist: JIT-compiled loops (numba) and a
vectorized numpy fallback.  ``SEMSPLAT_BACKEND`` picks one explicitly
("numba" / "numpy"); the default ("auto") uses numba when it imports.
``SEMSPLAT_THREADS`` caps the numba threading layer when set; the shipped
kernels are single-threaded for reproducibility, so this is a ceiling rather
than a request.
"""

import logging
import os

_log = logging.getLogger(__name__)

_requested = os.environ.get("SEMSPLAT_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"SEMSPLAT_BACKEND must be 'auto', 'numba' or 'numpy', got {_requested!r}")

try:
    import numba as _numba
    HAS_NUMBA = True
except ImportError:
    _numba = None
    HAS_NUMBA = False

if _requested == "numba" and not HAS_NUMBA:
    raise RuntimeError("SEMSPLAT_BACKEND=numba but numba is not installed")

BACKEND = "numpy" if (_requested == "numpy" or not HAS_NUMBA) else "numba"

if HAS_NUMBA:
    threads = os.environ.get("SEMSPLAT_THREADS")
    if threads:
        try:
            cap = max(1, int(threads))
        except ValueError:
            _log.warning("ignoring non-integer SEMSPLAT_THREADS=%r", threads)
        else:
            _numba.set_num_threads(min(cap, _numba.config.NUMBA_NUM_THREADS))

if BACKEND == "numba":
    from .compose_numba import (  # noqa: F401
        CUTOFF_SIGMA, WEIGHT_CLAMP, composite_backward, composite_forward,
        count_candidates, fill_candidates, warmup)
else:
    from .compose_numpy import (  # noqa: F401
        CUTOFF_SIGMA, WEIGHT_CLAMP, composite_backward, composite_forward,
        count_candidates, fill_candidates, warmup)


def get_backend(name: str):
    """Return a kernel module by name regardless of the active default."""
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        from . import compose_numba
        return compose_numba
    if name == "numpy":
        from . import compose_numpy
        return compose_numpy
    raise ValueError(f"unknown backend {name!r}")
