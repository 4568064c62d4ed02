"""Picks the compiled sampling kernels when they import, else the numpy ones."""

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

kernels = _ckernels if _ckernels is not None else _pykernels
name = "cython" if _ckernels is not None else "python"


def available():
    return sorted(_BACKENDS)


def use(backend):
    """Switch the active kernel module ("python" or "cython")."""
    global kernels, name
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} not available; have {available()}")
    kernels = _BACKENDS[backend]
    name = backend


def get(backend=None):
    return kernels if backend is None else _BACKENDS[backend]
