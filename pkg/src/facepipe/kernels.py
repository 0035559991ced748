"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``FACEPIPE_PURE=1`` to force the fallback.
"""

import os

from . import _pykernels as python_backend

try:
    if os.environ.get("FACEPIPE_PURE"):
        raise ImportError("pure backend forced")
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

BACKEND = "compiled" if compiled_backend is not None else "python"
_impl = compiled_backend if compiled_backend is not None else python_backend


def get_backend(name=None):
    """Return the kernel module called ``name`` ("compiled" or "python")."""
    if name is None:
        return _impl
    if name == "python":
        return python_backend
    if name == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        return compiled_backend
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    return ["python"] + (["compiled"] if compiled_backend is not None else [])


def maxpool_forward(x, kernel, stride):
    return _impl.maxpool_forward(x, kernel, stride)


def maxpool_backward(grad_out, arg, in_shape, kernel, stride):
    return _impl.maxpool_backward(grad_out, arg, tuple(in_shape), kernel, stride)


def lrn_forward(x, k, n, alpha, beta):
    return _impl.lrn_forward(x, k, n, alpha, beta)


def lrn_backward(x, denom, grad_out, k, n, alpha, beta):
    return _impl.lrn_backward(x, denom, grad_out, k, n, alpha, beta)


def scan_scale(*args):
    return _impl.scan_scale(*args)
