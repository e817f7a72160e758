"""Pure numpy row kernels. Same contract as the compiled ``_ckernels``.

Every function takes 2-D C-contiguous float arrays where the last axis is the
reduction axis. ``valid`` is a uint8 array of the same shape, or None.
"""

import numpy as np


def softmax_forward(x, valid=None):
    if valid is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=1, keepdims=True)
    keep = valid.astype(bool)
    if not keep.any(axis=1).all():
        row = int(np.flatnonzero(~keep.any(axis=1))[0])
        raise ValueError(f"masked softmax: row {row} has no valid position")
    neg = np.finfo(x.dtype).min
    m = np.where(keep, x, neg).max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, x - m, 0.0)), 0.0)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def softmax_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def log_softmax_forward(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_backward(y, gy):
    return gy - np.exp(y) * gy.sum(axis=1, keepdims=True)


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd.ravel()


def layer_norm_backward(gy, xhat, rstd, gain):
    n = xhat.shape[1]
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    g = gy * gain
    gx = (rstd[:, None] / n) * (
        n * g - g.sum(axis=1, keepdims=True) - xhat * (g * xhat).sum(axis=1, keepdims=True)
    )
    return gx, ggain, gbias
