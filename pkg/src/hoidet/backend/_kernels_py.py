"""Pure-numpy implementations of the hot numerical kernels.

Same contracts as the compiled twin in `_kernels_c.pyx`; the package
selects one of the two at import time. All inputs are C-contiguous
float64 arrays shaped (rows, width) unless noted; outputs are fresh
arrays except for `adamw_update`, which mutates in place.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid_bwd(y, g):
    return g * y * (1.0 - y)


def relu(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, g):
    return np.where(x > 0.0, g, 0.0)


def softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_rows_bwd(y, g):
    dot = np.einsum("ij,ij->i", y, g)[:, None]
    return y * (g - dot)


def layer_norm_rows(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.einsum("ij,ij->i", xc, xc)[:, None] / x.shape[1]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0].copy()


def layer_norm_rows_bwd(g, xhat, inv_std, gain):
    dxhat = g * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = np.einsum("ij,ij->i", dxhat, xhat)[:, None] / g.shape[1]
    dx = (dxhat - m1 - xhat * m2) * inv_std[:, None]
    dgain = np.einsum("ij,ij->j", g, xhat)
    dbias = g.sum(axis=0)
    return dx, dgain, dbias


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, t):
    p *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
