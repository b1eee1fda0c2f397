# Compiled twin of _kernels_py. Fused single-pass loops over row-major
# float64 buffers; selected at import when available.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, log

cnp.import_array()


def sigmoid(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[::1] xv = x.reshape(-1)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = 1.0 / (1.0 + exp(-xv[i]))
    return out


def sigmoid_bwd(cnp.ndarray y, cnp.ndarray g):
    cdef cnp.ndarray out = np.empty_like(y)
    cdef double[::1] yv = y.reshape(-1)
    cdef double[::1] gv = g.reshape(-1)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = yv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = gv[i] * yv[i] * (1.0 - yv[i])
    return out


def relu(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[::1] xv = x.reshape(-1)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] if xv[i] > 0.0 else 0.0
    return out


def relu_bwd(cnp.ndarray x, cnp.ndarray g):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[::1] xv = x.reshape(-1)
    cdef double[::1] gv = g.reshape(-1)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = gv[i] if xv[i] > 0.0 else 0.0
    return out


def softmax_rows(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, rows = xv.shape[0], cols = xv.shape[1]
    cdef double m, s
    with nogil:
        for i in range(rows):
            m = xv[i, 0]
            for j in range(1, cols):
                if xv[i, j] > m:
                    m = xv[i, j]
            s = 0.0
            for j in range(cols):
                ov[i, j] = exp(xv[i, j] - m)
                s += ov[i, j]
            for j in range(cols):
                ov[i, j] /= s
    return out


def softmax_rows_bwd(cnp.ndarray y, cnp.ndarray g):
    cdef cnp.ndarray out = np.empty_like(y)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] gv = g
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, rows = yv.shape[0], cols = yv.shape[1]
    cdef double dot
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += yv[i, j] * gv[i, j]
            for j in range(cols):
                ov[i, j] = yv[i, j] * (gv[i, j] - dot)
    return out


def layer_norm_rows(cnp.ndarray x, cnp.ndarray gain, cnp.ndarray bias, double eps):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef cnp.ndarray xhat_arr = np.empty_like(x)
    cdef cnp.ndarray inv_arr = np.empty(x.shape[0], dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] hv = xhat_arr
    cdef double[::1] iv = inv_arr
    cdef double[::1] gv = gain
    cdef double[::1] bv = bias
    cdef Py_ssize_t i, j, rows = xv.shape[0], cols = xv.shape[1]
    cdef double mu, var, inv, d
    with nogil:
        for i in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += xv[i, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                d = xv[i, j] - mu
                var += d * d
            var /= cols
            inv = 1.0 / sqrt(var + eps)
            iv[i] = inv
            for j in range(cols):
                hv[i, j] = (xv[i, j] - mu) * inv
                ov[i, j] = hv[i, j] * gv[j] + bv[j]
    return out, xhat_arr, inv_arr


def layer_norm_rows_bwd(cnp.ndarray g, cnp.ndarray xhat, cnp.ndarray inv_std,
                        cnp.ndarray gain):
    cdef cnp.ndarray dx = np.empty_like(g)
    cdef cnp.ndarray dgain = np.zeros(g.shape[1], dtype=np.float64)
    cdef cnp.ndarray dbias = np.zeros(g.shape[1], dtype=np.float64)
    cdef double[:, ::1] gv = g
    cdef double[:, ::1] hv = xhat
    cdef double[::1] iv = inv_std
    cdef double[::1] wv = gain
    cdef double[:, ::1] dxv = dx
    cdef double[::1] dgv = dgain
    cdef double[::1] dbv = dbias
    cdef Py_ssize_t i, j, rows = gv.shape[0], cols = gv.shape[1]
    cdef double m1, m2, dh
    with nogil:
        for i in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                dh = gv[i, j] * wv[j]
                m1 += dh
                m2 += dh * hv[i, j]
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                dh = gv[i, j] * wv[j]
                dxv[i, j] = (dh - m1 - hv[i, j] * m2) * iv[i]
                dgv[j] += gv[i, j] * hv[i, j]
                dbv[j] += gv[i, j]
    return dx, dgain, dbias


def adamw_update(cnp.ndarray p, cnp.ndarray g, cnp.ndarray m, cnp.ndarray v,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay, long t):
    cdef double[::1] pv = p.reshape(-1)
    cdef double[::1] gv = g.reshape(-1)
    cdef double[::1] mv = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double decay = 1.0 - lr * weight_decay
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    with nogil:
        for i in range(n):
            pv[i] *= decay
            mv[i] = beta1 * mv[i] + (1.0 - beta1) * gv[i]
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * gv[i] * gv[i]
            pv[i] -= lr * (mv[i] / c1) / (sqrt(vv[i] / c2) + eps)
