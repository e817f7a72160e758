"""Row-kernel backend, chosen once at import.

The compiled ``_ckernels`` module is used when it was built; otherwise the
numpy implementation in ``_kernels_py``. Set ``PRT_KERNELS=python`` to force
the fallback.

Log-softmax defaults to numpy on either backend: its cost is one ``exp`` per
entry, and numpy's vectorized ``exp`` beats the compiled scalar loop
(see ``benchmarks/bench_kernels.py``). The compiled version stays reachable
through ``impl=``.
"""

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("PRT_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _rows(a):
    a = np.ascontiguousarray(a)
    return a.reshape(-1, a.shape[-1])


def softmax(x, valid=None, impl=None):
    impl = impl or _impl
    x2 = _rows(x)
    v2 = None
    if valid is not None:
        v2 = _rows(np.broadcast_to(valid, x.shape).astype(np.uint8, copy=False))
    return impl.softmax_forward(x2, v2).reshape(x.shape)


def softmax_grad(y, gy, impl=None):
    impl = impl or _impl
    return impl.softmax_backward(_rows(y), _rows(gy.astype(y.dtype, copy=False))).reshape(y.shape)


def log_softmax(x, impl=None):
    impl = impl or _kernels_py
    return impl.log_softmax_forward(_rows(x)).reshape(x.shape)


def log_softmax_grad(y, gy, impl=None):
    impl = impl or _kernels_py
    return impl.log_softmax_backward(_rows(y), _rows(gy.astype(y.dtype, copy=False))).reshape(y.shape)


def layer_norm(x, gain, bias, eps, impl=None):
    impl = impl or _impl
    dt = x.dtype
    y, xhat, rstd = impl.layer_norm_forward(
        _rows(x), np.ascontiguousarray(gain, dtype=dt), np.ascontiguousarray(bias, dtype=dt), float(eps)
    )
    return y.reshape(x.shape), xhat, rstd


def layer_norm_grad(gy, xhat, rstd, gain, impl=None):
    impl = impl or _impl
    dt = xhat.dtype
    gx, ggain, gbias = impl.layer_norm_backward(
        _rows(gy.astype(dt, copy=False)), xhat, np.ascontiguousarray(rstd, dtype=dt),
        np.ascontiguousarray(gain, dtype=dt),
    )
    return gx.reshape(gy.shape), ggain, gbias


def implementations():
    """Available kernel modules keyed by backend name."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
