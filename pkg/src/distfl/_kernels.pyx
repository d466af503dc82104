# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled BatchNorm and KL kernels. Mirrors ``_kernels_py`` one for one."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log

cnp.import_array()


def batch_mean_var(const double[:, ::1] x):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], i, j
    mean_arr = np.zeros(c, dtype=np.float64)
    var_arr = np.zeros(c, dtype=np.float64)
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef double d
    for i in range(b):
        for j in range(c):
            mean[j] += x[i, j]
    for j in range(c):
        mean[j] /= b
    for i in range(b):
        for j in range(c):
            d = x[i, j] - mean[j]
            var[j] += d * d
    for j in range(c):
        var[j] /= b
    return mean_arr, var_arr


def bn_forward_train(const double[:, ::1] x, const double[::1] gamma,
                     const double[::1] beta, double eps):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], i, j
    mean_arr, var_arr = batch_mean_var(x)
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    inv_arr = np.empty(c, dtype=np.float64)
    xhat_arr = np.empty((b, c), dtype=np.float64)
    y_arr = np.empty((b, c), dtype=np.float64)
    cdef double[::1] inv_std = inv_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[:, ::1] y = y_arr
    for j in range(c):
        inv_std[j] = 1.0 / sqrt(var[j] + eps)
    for i in range(b):
        for j in range(c):
            xhat[i, j] = (x[i, j] - mean[j]) * inv_std[j]
            y[i, j] = gamma[j] * xhat[i, j] + beta[j]
    return y_arr, xhat_arr, mean_arr, var_arr, inv_arr


def bn_backward_train(const double[:, ::1] dy, const double[:, ::1] xhat,
                      const double[::1] gamma, const double[::1] inv_std):
    cdef Py_ssize_t b = dy.shape[0], c = dy.shape[1], i, j
    dgamma_arr = np.zeros(c, dtype=np.float64)
    dbeta_arr = np.zeros(c, dtype=np.float64)
    dx_arr = np.empty((b, c), dtype=np.float64)
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double[:, ::1] dx = dx_arr
    for i in range(b):
        for j in range(c):
            dbeta[j] += dy[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
    # sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
    for i in range(b):
        for j in range(c):
            dx[i, j] = gamma[j] * inv_std[j] / b * (
                b * dy[i, j] - dbeta[j] - xhat[i, j] * dgamma[j])
    return dx_arr, dgamma_arr, dbeta_arr


def kl_matrix(const double[:, ::1] resp, double floor):
    cdef Py_ssize_t n = resp.shape[0], m = resp.shape[1], p, q, j
    logs_arr = np.empty((n, m), dtype=np.float64)
    out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] logs = logs_arr
    cdef double[:, ::1] out = out_arr
    cdef double v, acc
    for p in range(n):
        for j in range(m):
            v = resp[p, j]
            logs[p, j] = log(v if v > floor else floor)
    for p in range(n):
        for q in range(n):
            if p == q:
                continue
            acc = 0.0
            for j in range(m):
                acc += resp[p, j] * (logs[p, j] - logs[q, j])
            out[p, q] = acc
    return out_arr
