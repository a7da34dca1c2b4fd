"""Selects the compiled kernel extension at import, falling back to numpy.

Set MCF_BACKEND=fallback to force the pure-numpy path (used by the backend
benchmark and the cross-backend tests); MCF_BACKEND=compiled makes a missing
extension a hard error instead of a silent fallback.
"""

import os

from . import _kernels_py

_forced = os.environ.get("MCF_BACKEND", "").strip().lower()

if _forced == "fallback":
    kernels = _kernels_py
else:
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
    except ImportError:
        if _forced == "compiled":
            raise
        kernels = _kernels_py


def backend_name():
    """'compiled' when the extension is active, else 'fallback'."""
    return kernels.BACKEND_NAME
