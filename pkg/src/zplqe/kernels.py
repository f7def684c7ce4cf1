"""Backend selection for the time-tag kernels.

The compiled extension is used when importable; set ``ZPLQE_PURE_PYTHON=1``
to force the NumPy fallback.
"""
import logging
import os

from . import _pykernels

_logger = logging.getLogger(__name__)

if os.environ.get("ZPLQE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _logger.debug("compiled kernels unavailable, using NumPy fallback")
        _impl = _pykernels
        BACKEND = "python"

deadtime_mask = _impl.deadtime_mask
cross_correlate = _impl.cross_correlate

__all__ = ["BACKEND", "deadtime_mask", "cross_correlate"]
