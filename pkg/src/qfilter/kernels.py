"""Backend selection for the stepping kernels.

The compiled extension is used when it imports; otherwise the numpy
versions are used.  Setting ``QFILTER_BACKEND=python`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND_ENV = "QFILTER_BACKEND"

_compiled = None
if os.environ.get(BACKEND_ENV, "").strip().lower() != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None

if _compiled is not None:
    BACKEND = "compiled"
    sme_integrate = _compiled.sme_integrate
    riccati_rk4 = _compiled.riccati_rk4
else:
    BACKEND = "python"
    sme_integrate = _kernels_py.sme_integrate
    riccati_rk4 = _kernels_py.riccati_rk4

__all__ = ["BACKEND", "BACKEND_ENV", "sme_integrate", "riccati_rk4"]
