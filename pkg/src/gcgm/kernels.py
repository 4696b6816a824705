"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the pure-Python
fallback.  Set ``GCGM_PURE_PYTHON=1`` to force the fallback.  Both modules
expose ``mh_sweeps``, ``laplace_edge``, ``edge_messages``, ``edge_update`` and
``message_change``.
"""
import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKEND = "python"
_active = _kernels_py
if _compiled is not None and os.environ.get("GCGM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    BACKEND = "cython"
    _active = _compiled

mh_sweeps = _active.mh_sweeps
laplace_edge = _active.laplace_edge
edge_messages = _active.edge_messages
edge_update = _active.edge_update
message_change = _active.message_change

NOISE_CODES = {
    "exact": _kernels_py.NOISE_EXACT,
    "gaussian": _kernels_py.NOISE_GAUSSIAN,
    "poisson": _kernels_py.NOISE_POISSON,
}
FLAG_CONVERGED = _kernels_py.FLAG_CONVERGED
FLAG_LINE_SEARCH = _kernels_py.FLAG_LINE_SEARCH
FLAG_NONMONOTONE = _kernels_py.FLAG_NONMONOTONE
FLAG_PROFILE = _kernels_py.FLAG_PROFILE


def backends():
    """Mapping name -> kernel module for every importable backend."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def get(name=None):
    """Kernel module by name; ``None`` gives the active backend."""
    if name is None:
        return _active
    try:
        return backends()[name]
    except KeyError:
        raise ValueError(f"backend {name!r} is not available") from None
