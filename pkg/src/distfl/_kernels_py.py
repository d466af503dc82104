"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def batch_mean_var(x):
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    return mean, var


def bn_forward_train(x, gamma, beta, eps):
    mean, var = batch_mean_var(x)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, xhat, mean, var, inv_std


def bn_backward_train(dy, xhat, gamma, inv_std):
    b = dy.shape[0]
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dx = gamma * inv_std / b * (b * dy - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


def kl_matrix(resp, floor):
    logs = np.log(np.maximum(resp, floor))
    n = resp.shape[0]
    out = np.zeros((n, n))
    for p in range(n):
        row = (resp[p] * (logs[p] - logs)).sum(axis=1)
        row[p] = 0.0
        out[p] = row
    return out
