"""Backend selection for the privacy-loss kernels.

Prefers the compiled extension; falls back to NumPy when the extension is
missing or when ``CORRDP_PURE_PYTHON=1`` is set.  ``benchmarks/bench_kernels.py``
compares the two.
"""

from __future__ import annotations

import os

from . import _mc_fallback

if os.environ.get("CORRDP_PURE_PYTHON", "") == "1":
    _impl = _mc_fallback
else:
    try:
        from . import _mc_kernel as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _mc_fallback

BACKEND = _impl.BACKEND
HAVE_EXTENSION = BACKEND == "cython"

log_ratio_add = _impl.log_ratio_add
log_ratio_remove = _impl.log_ratio_remove


def backends() -> dict:
    """All importable kernel backends, keyed by name (for tests/benchmarks)."""
    found = {"numpy": _mc_fallback}
    try:
        from . import _mc_kernel  # type: ignore[attr-defined]

        found["cython"] = _mc_kernel
    except ImportError:
        pass
    return found
