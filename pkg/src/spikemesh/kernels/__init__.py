"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

Set SPIKEMESH_PURE_PYTHON=1 to force the numpy fallback even when the
compiled module is importable.  Both backends are bit-compatible; the
choice only affects speed.
"""

from __future__ import annotations

import os

from . import _numpy_impl

_FORCE_PURE = os.environ.get("SPIKEMESH_PURE_PYTHON", "") not in ("", "0")

_compiled = None
if not _FORCE_PURE:
    try:
        from . import _speedups as _compiled
    except ImportError:
        _compiled = None

_active = _compiled if _compiled is not None else _numpy_impl

lif_step = _active.lif_step
deliver_spikes = _active.deliver_spikes


def backend_name() -> str:
    return _active.BACKEND_NAME


def available_backends() -> dict:
    """Importable backends by name (for the comparison benchmark/tests)."""
    backends = {"numpy": _numpy_impl}
    try:
        from . import _speedups
        backends["cython"] = _speedups
    except ImportError:
        pass
    return backends
