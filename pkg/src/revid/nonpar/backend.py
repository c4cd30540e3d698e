"""Kernel-sum backend selection.

The two hot kernels (local-linear moment sums and smoothed-CDF sums) exist
twice: a Cython extension and a NumPy fallback with identical semantics.
The extension is used when importable; set REVID_BACKEND=python or =cython
to force a choice.
"""

from __future__ import annotations

import os

from . import _fallback

_requested = os.environ.get("REVID_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "REVID_BACKEND=cython requested but the compiled extension is "
                "not available; build it with `pip install -e . --no-build-isolation`"
            )
        _impl = _fallback
        BACKEND = "python"

llr_moments = _impl.llr_moments
cdf_moments = _impl.cdf_moments
cdf_ll_moments = _impl.cdf_ll_moments


def get_impl(name: str):
    """Return a specific backend module by name (for benchmarks/tests)."""
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")
