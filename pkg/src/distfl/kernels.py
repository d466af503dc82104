"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``DISTFL_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DISTFL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def batch_mean_var(x):
    """Per-column mean and population variance of a 2-D batch."""
    return _impl.batch_mean_var(_c(x))


def bn_forward_train(x, gamma, beta, eps):
    """Normalize with batch statistics. Returns ``(y, xhat, mean, var, inv_std)``."""
    return _impl.bn_forward_train(_c(x), _c(gamma), _c(beta), float(eps))


def bn_backward_train(dy, xhat, gamma, inv_std):
    """Backward of ``bn_forward_train``. Returns ``(dx, dgamma, dbeta)``."""
    return _impl.bn_backward_train(_c(dy), _c(xhat), _c(gamma), _c(inv_std))


def kl_matrix(resp, floor=1e-12):
    """Row-wise KL divergence ``D[p, q] = sum_j P[p,j] ln(P[p,j] / P[q,j])``.

    Logs are taken of ``max(P, floor)``; the diagonal is exactly zero.
    """
    return _impl.kl_matrix(_c(resp), float(floor))
