"""Kernel backend selection.

The compiled extension ``divem._ext`` is used when it imports; otherwise,
or when the environment variable ``DIVEM_PURE_PYTHON`` is set to ``1``, the
numpy fallback in ``divem._kernels_py`` is used.  Both expose the same three
functions.
"""

import os

from . import _kernels_py

_ext = None
if os.environ.get("DIVEM_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _ext
    except ImportError:  # extension not built
        _ext = None

_impl = _ext if _ext is not None else _kernels_py

BACKEND = "cython" if _ext is not None else "python"

digamma = _impl.digamma
trigamma = _impl.trigamma
hmm_forward_backward = _impl.hmm_forward_backward


def available_backends():
    """Mapping of backend name to module for every importable backend."""
    out = {"python": _kernels_py}
    if _ext is not None:
        out["cython"] = _ext
    else:
        try:
            from . import _ext as ext
        except ImportError:
            pass
        else:
            out["cython"] = ext
    return out
