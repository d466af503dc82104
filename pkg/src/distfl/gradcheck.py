"""Finite-difference verification of the hand-derived gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

STEP = 1e-5
TOLERANCE = 1e-4
# Elements whose analytic and numeric gradients are both below this are
# compared in absolute terms; relative error is meaningless at ~0.
FLOOR = 1e-6


def numerical_gradient(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_model(rng: np.random.Generator, max_width: int = 16) -> nn.ModelParams:
    """Two-hidden-layer MLP-BN with randomised BN parameters and statistics."""
    d = int(rng.integers(2, 7))
    c = int(rng.integers(2, 6))
    hidden = [int(rng.integers(2, max_width + 1)) for _ in range(2)]
    model = nn.init_model(d, hidden, c, rng)
    for layer in model.layers:
        if isinstance(layer, nn.Linear):
            layer.bias = rng.normal(0, 0.5, layer.bias.shape)
        elif isinstance(layer, nn.BatchNorm):
            k = layer.channels
            layer.gamma = rng.uniform(0.5, 1.5, k) * rng.choice([-1.0, 1.0], k)
            layer.beta = rng.normal(0, 0.5, k)
            layer.running_mean = rng.normal(0, 1.0, k)
            layer.running_var = rng.uniform(0.5, 2.0, k)
    return model


@dataclass
class CheckResult:
    seed: int
    param_error: float
    input_error: float
    bn_match_error: float

    @property
    def worst(self) -> float:
        return max(self.param_error, self.input_error, self.bn_match_error)

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def check_seed(seed: int, batch_size: int = 8) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    x = rng.normal(0, 1.5, (batch_size, model.input_dim))
    y = rng.integers(0, model.num_classes, batch_size)

    _, grads = nn.loss_and_grads(model, x, y, want_input_grad=True)
    param_err = 0.0
    for p, g in zip(model.trainable(), grads.params):
        num = numerical_gradient(lambda: nn.loss_and_grads(model, x, y)[0], p)
        param_err = max(param_err, max_relative_error(g, num))
    num_x = numerical_gradient(lambda: nn.loss_and_grads(model, x, y)[0], x)
    input_err = max_relative_error(grads.input, num_x)

    selection = [np.sort(rng.choice(layer.channels, max(1, layer.channels // 2), replace=False))
                 for layer in model.bn_layers()]
    _, gin = nn.bn_match_loss_and_input_grad(model, x, selection)
    num_bn = numerical_gradient(lambda: nn.bn_match_loss_and_input_grad(model, x, selection)[0], x)
    bn_err = max_relative_error(gin, num_bn)
    return CheckResult(seed, param_err, input_err, bn_err)


def run_suite(seed: int = 0, n_models: int = 10) -> list:
    return [check_seed(seed * 1000 + i) for i in range(n_models)]
