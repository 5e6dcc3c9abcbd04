"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
version is used. Set ``SAFEREALIGN_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None
else:
    BACKENDS["cython"] = _compiled

if _compiled is not None and os.environ.get("SAFEREALIGN_PURE_PYTHON", "") not in ("1", "true"):
    BACKEND = "cython"
else:
    BACKEND = "python"


def get(name: str | None = None):
    """Kernel module for ``name`` (default: the active backend)."""
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
