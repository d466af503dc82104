"""Small MLP-BN networks with hand-derived backward passes.

The family is ``Input(d) -> [Linear -> BatchNorm -> ReLU] x L -> Linear(C)``
followed by a softmax head. Everything is float64 and numpy-backed; the
BatchNorm inner loops go through :mod:`distfl.kernels`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import kernels

EPS_BN = 1e-5
MOMENTUM_BN = 0.1

MODES = ("train", "eval", "probe")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


@dataclass
class Linear:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = EPS_BN
    momentum: float = MOMENTUM_BN

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class ReLU:
    pass


Layer = Union[Linear, BatchNorm, ReLU]


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    local_epochs: int = 5
    batch_size: int = 16

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be positive")


@dataclass
class ModelParams:
    layers: list
    input_dim: int
    num_classes: int

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        width = self.input_dim
        has_bn = False
        for layer in self.layers:
            if isinstance(layer, Linear):
                if layer.weight.ndim != 2 or layer.in_features != width:
                    raise ShapeError(
                        f"linear layer expects {layer.weight.shape[1:]} inputs, got width {width}"
                    )
                if layer.bias.shape != (layer.out_features,):
                    raise ShapeError("bias length does not match weight rows")
                width = layer.out_features
            elif isinstance(layer, BatchNorm):
                has_bn = True
                shapes = {a.shape for a in (layer.gamma, layer.beta, layer.running_mean, layer.running_var)}
                if shapes != {(width,)}:
                    raise ShapeError(f"batchnorm vectors must all have length {width}")
                if np.any(layer.running_var < 0):
                    raise ValueError("running_var must be nonnegative")
            elif not isinstance(layer, ReLU):
                raise TypeError(f"unknown layer {layer!r}")
        if not self.layers or not isinstance(self.layers[-1], Linear):
            raise ShapeError("last layer must be Linear")
        if width != self.num_classes:
            raise ShapeError(f"output width {width} != num_classes {self.num_classes}")
        if not has_bn:
            raise ShapeError("model needs at least one BatchNorm layer")

    def copy(self) -> "ModelParams":
        layers = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                layers.append(Linear(layer.weight.copy(), layer.bias.copy()))
            elif isinstance(layer, BatchNorm):
                layers.append(
                    BatchNorm(
                        layer.gamma.copy(),
                        layer.beta.copy(),
                        layer.running_mean.copy(),
                        layer.running_var.copy(),
                        layer.eps,
                        layer.momentum,
                    )
                )
            else:
                layers.append(layer)
        return ModelParams(layers, self.input_dim, self.num_classes)

    def bn_layers(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def trainable(self) -> list:
        """Trainable tensors in canonical order (weight, bias / gamma, beta per layer)."""
        out = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                out += [layer.weight, layer.bias]
            elif isinstance(layer, BatchNorm):
                out += [layer.gamma, layer.beta]
        return out

    def running_stats(self) -> list:
        out = []
        for layer in self.bn_layers():
            out += [layer.running_mean, layer.running_var]
        return out

    def with_trainable(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        """Copy of this model with trainable tensors replaced by ``arrays``."""
        new = self.copy()
        targets = new.trainable()
        if len(arrays) != len(targets):
            raise ShapeError("wrong number of parameter tensors")
        for dst, src in zip(targets, arrays):
            if dst.shape != np.shape(src):
                raise ShapeError(f"shape {np.shape(src)} != {dst.shape}")
            dst[...] = src
        new.validate()
        return new

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.trainable()])

    def same_shape(self, other: "ModelParams") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if type(a) is not type(b):
                return False
        return [p.shape for p in self.trainable()] == [p.shape for p in other.trainable()]

    def hidden_widths(self) -> list:
        return [layer.channels for layer in self.bn_layers()]


@dataclass
class GradientSet:
    """One gradient per trainable tensor, aligned with :meth:`ModelParams.trainable`."""

    params: list
    input: Optional[np.ndarray] = None
    batch_stats: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, model: ModelParams) -> "GradientSet":
        return cls([np.zeros_like(p) for p in model.trainable()])


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    batch_stats: list  # (mean, var) per BN layer; empty in eval mode


def init_model(input_dim: int, hidden: Sequence[int], num_classes: int, rng: np.random.Generator) -> ModelParams:
    """He-initialised MLP-BN; BN starts at the identity (gamma=1, beta=0, mean=0, var=1)."""
    layers = []
    width = input_dim
    for h in hidden:
        w = rng.normal(0.0, math.sqrt(2.0 / width), size=(h, width))
        layers += [
            Linear(w, np.zeros(h)),
            BatchNorm(np.ones(h), np.zeros(h), np.zeros(h), np.ones(h)),
            ReLU(),
        ]
        width = h
    w = rng.normal(0.0, math.sqrt(1.0 / width), size=(num_classes, width))
    layers.append(Linear(w, np.zeros(num_classes)))
    return ModelParams(layers, input_dim, num_classes)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_batch(model: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim or batch.shape[0] < 1:
        raise ShapeError(f"batch must be [b x {model.input_dim}], got {batch.shape}")
    if not np.all(np.isfinite(batch)):
        raise NonFiniteError("batch contains non-finite values")
    return batch


def _forward(model: ModelParams, x: np.ndarray, mode: str):
    """Pure forward pass. Returns ``(logits, cache, batch_stats, bn_inputs)``.

    ``train`` normalises with batch statistics; ``eval`` and ``probe`` use the
    running statistics. ``train`` and ``probe`` also report per-BN-layer batch
    statistics of the BN inputs. Nothing is mutated in any mode.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "train" and x.shape[0] < 2:
        raise ShapeError("train mode needs a batch of at least 2")
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_layers(model, x, mode)


def _forward_layers(model, x, mode):
    cache = []
    stats = []
    bn_inputs = []
    h = x
    for layer in model.layers:
        if isinstance(layer, Linear):
            cache.append(h)
            h = h @ layer.weight.T + layer.bias
        elif isinstance(layer, BatchNorm):
            bn_inputs.append(h)
            if mode == "train":
                h, xhat, mean, var, inv_std = kernels.bn_forward_train(h, layer.gamma, layer.beta, layer.eps)
                stats.append((mean, var))
                cache.append((xhat, inv_std))
            else:
                if mode == "probe":
                    stats.append(kernels.batch_mean_var(h))
                inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
                h = (h - layer.running_mean) * (layer.gamma * inv_std) + layer.beta
                cache.append(inv_std)
        else:
            cache.append(h > 0)
            h = np.maximum(h, 0.0)
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("non-finite activation in forward pass")
    return h, cache, stats, bn_inputs


def _backward(model: ModelParams, cache, grad_out, mode: str, injected=None, need_params=True):
    """Backpropagate ``grad_out`` (may be None) from the logits to the input.

    ``injected`` maps BN-layer ordinal -> gradient added at that BN layer's input.
    Returns ``(param_grads, input_grad)``; param grads follow ``trainable()``.
    """
    injected = injected or {}
    n_bn = sum(isinstance(layer, BatchNorm) for layer in model.layers)
    bn_idx = n_bn
    g = grad_out
    pgrads = []
    for layer, saved in zip(reversed(model.layers), reversed(cache)):
        if isinstance(layer, Linear):
            if g is None:
                if need_params:
                    pgrads += [np.zeros_like(layer.bias), np.zeros_like(layer.weight)]
                continue
            if need_params:
                pgrads += [g.sum(axis=0), g.T @ saved]
            g = g @ layer.weight
        elif isinstance(layer, BatchNorm):
            bn_idx -= 1
            if g is None:
                if need_params:
                    pgrads += [np.zeros_like(layer.beta), np.zeros_like(layer.gamma)]
            elif mode == "train":
                xhat, inv_std = saved
                g, dgamma, dbeta = kernels.bn_backward_train(g, xhat, layer.gamma, inv_std)
                if need_params:
                    pgrads += [dbeta, dgamma]
            else:
                if need_params:
                    raise NotImplementedError("parameter gradients need train mode")
                g = g * (layer.gamma * saved)
            extra = injected.get(bn_idx)
            if extra is not None:
                g = extra if g is None else g + extra
        else:
            if g is not None:
                g = g * saved
    if need_params:
        pgrads.reverse()
    return pgrads, g


def update_running_stats(model: ModelParams, batch_stats) -> None:
    """In place: ``running = (1 - m) * running + m * batch_stat`` per BN layer."""
    for layer, (mean, var) in zip(model.bn_layers(), batch_stats):
        m = layer.momentum
        layer.running_mean = (1.0 - m) * layer.running_mean + m * mean
        layer.running_var = (1.0 - m) * layer.running_var + m * var


def forward(model: ModelParams, batch, mode: str = "eval") -> ForwardResult:
    """Run the network. ``train`` mode also updates the model's running statistics."""
    x = _check_batch(model, batch)
    logits, _, stats, _ = _forward(model, x, mode)
    if mode == "train":
        update_running_stats(model, stats)
    return ForwardResult(logits, softmax(logits), stats)


def predict(model: ModelParams, batch) -> np.ndarray:
    """Argmax class per row (ties go to the lowest index)."""
    x = _check_batch(model, batch)
    logits, _, _, _ = _forward(model, x, "eval")
    return np.argmax(logits, axis=1)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _check_labels(model: ModelParams, labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError("need exactly one label per row")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError("labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return labels


def loss_and_grads(model: ModelParams, batch, labels, want_input_grad: bool = False, mode: str = "train"):
    """Mean cross-entropy and its gradients.

    Does not touch the running statistics; the batch statistics of a train-mode
    pass come back in ``grads.batch_stats`` so the caller can apply them with
    :func:`update_running_stats`.
    """
    x = _check_batch(model, batch)
    labels = _check_labels(model, labels, x.shape[0])
    if mode not in ("train", "eval"):
        raise ValueError("loss_and_grads runs in train or eval mode")
    logits, cache, stats, _ = _forward(model, x, mode)
    b = x.shape[0]
    probs = softmax(logits)
    loss = cross_entropy(logits, labels)
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    if mode == "eval":
        _, gin = _backward(model, cache, dlogits, "eval", need_params=False)
        return loss, GradientSet([], gin if want_input_grad else None, stats)
    pgrads, gin = _backward(model, cache, dlogits, "train")
    return loss, GradientSet(pgrads, gin if want_input_grad else None, stats)


def full_selection(model: ModelParams) -> list:
    return [np.arange(layer.channels) for layer in model.bn_layers()]


def _norm_term(diff: np.ndarray, squared: bool):
    with np.errstate(over="ignore"):  # overflow surfaces as an infinite loss
        sq = float(diff @ diff)
    if squared:
        return sq, 2.0 * diff
    n = math.sqrt(sq)
    if n == 0.0:
        return 0.0, np.zeros_like(diff)
    return n, diff / n


def bn_match_loss_and_input_grad(model: ModelParams, batch, selection=None, squared: bool = False):
    """Distance between batch statistics and running statistics, plus d(loss)/d(batch).

    For every BN layer ``i`` and its selected channels ``S``::

        ||mean_S(X) - running_mean_S||_2 + ||var_S(X) - running_var_S||_2

    summed over layers. Statistics are taken of each BN layer's input while the
    network normalises with its running statistics (probe mode). ``squared``
    swaps the Euclidean norms for squared norms.
    """
    bns = model.bn_layers()
    if not bns:
        raise ShapeError("model has no BatchNorm layers")
    if selection is None:
        selection = full_selection(model)
    if len(selection) != len(bns):
        raise ShapeError("need one channel subset per BN layer")
    selection = [np.asarray(s, dtype=np.intp) for s in selection]
    if all(len(s) == 0 for s in selection):
        raise ValueError("selection is empty in every layer")
    for s, layer in zip(selection, bns):
        if len(s) and (s.min() < 0 or s.max() >= layer.channels):
            raise IndexError("selected channel out of range")
    x = _check_batch(model, batch)
    b = x.shape[0]
    if b < 2:
        raise ShapeError("batch statistics need at least 2 rows")
    _, cache, stats, bn_inputs = _forward(model, x, "probe")
    loss = 0.0
    injected = {}
    for i, (layer, s, (mean, var), h) in enumerate(zip(bns, selection, stats, bn_inputs)):
        if len(s) == 0:
            continue
        lm, gm = _norm_term(mean[s] - layer.running_mean[s], squared)
        lv, gv = _norm_term(var[s] - layer.running_var[s], squared)
        loss += lm + lv
        g = np.zeros_like(h)
        g[:, s] = gm / b + (2.0 / b) * (h[:, s] - mean[s]) * gv
        injected[i] = g
    _, gin = _backward(model, cache, None, "probe", injected=injected, need_params=False)
    return loss, gin


def sgd_step(model: ModelParams, grads: GradientSet, velocity: GradientSet, cfg: TrainConfig):
    """Momentum SGD: ``v = momentum * v + g``; ``p = p - lr * v``. Returns new objects."""
    params = model.trainable()
    if len(grads.params) != len(params) or len(velocity.params) != len(params):
        raise ShapeError("gradient/velocity count does not match the model")
    new_v = []
    new_p = []
    for p, g, v in zip(params, grads.params, velocity.params):
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v2 = cfg.momentum * v + g
        new_v.append(v2)
        new_p.append(p - cfg.learning_rate * v2)
    return model.with_trainable(new_p), GradientSet(new_v)


# -- checkpoints -------------------------------------------------------------


def model_to_dict(model: ModelParams) -> dict:
    layers = []
    for layer in model.layers:
        if isinstance(layer, Linear):
            layers.append({"kind": "linear", "weight": layer.weight.tolist(), "bias": layer.bias.tolist()})
        elif isinstance(layer, BatchNorm):
            layers.append(
                {
                    "kind": "batchnorm",
                    "gamma": layer.gamma.tolist(),
                    "beta": layer.beta.tolist(),
                    "running_mean": layer.running_mean.tolist(),
                    "running_var": layer.running_var.tolist(),
                    "eps": layer.eps,
                    "momentum": layer.momentum,
                }
            )
        else:
            layers.append({"kind": "relu"})
    return {"input_dim": model.input_dim, "num_classes": model.num_classes, "layers": layers}


def model_from_dict(d: dict) -> ModelParams:
    layers = []
    for spec in d["layers"]:
        kind = spec["kind"]
        if kind == "linear":
            w = np.array(spec["weight"], dtype=np.float64)
            layers.append(Linear(w.reshape(len(spec["weight"]), -1), np.array(spec["bias"], dtype=np.float64)))
        elif kind == "batchnorm":
            layers.append(
                BatchNorm(
                    np.array(spec["gamma"], dtype=np.float64),
                    np.array(spec["beta"], dtype=np.float64),
                    np.array(spec["running_mean"], dtype=np.float64),
                    np.array(spec["running_var"], dtype=np.float64),
                    float(spec.get("eps", EPS_BN)),
                    float(spec.get("momentum", MOMENTUM_BN)),
                )
            )
        elif kind == "relu":
            layers.append(ReLU())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return ModelParams(layers, int(d["input_dim"]), int(d["num_classes"]))


def save_model(model: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> ModelParams:
    return model_from_dict(json.loads(Path(path).read_text()))


def average_models(models: Sequence[ModelParams]) -> ModelParams:
    """Unweighted mean of every trainable tensor and running statistic.

    Models are summed in the given order, then divided once, so the result is
    bitwise reproducible for a fixed ordering.
    """
    if not models:
        raise ValueError("cannot average an empty set of models")
    first = models[0]
    for m in models[1:]:
        if not first.same_shape(m):
            raise ShapeError("models are not shape-compatible")
    out = first.copy()
    n = float(len(models))
    acc_p = [p.copy() for p in first.trainable()]
    acc_s = [s.copy() for s in first.running_stats()]
    for m in models[1:]:
        for a, p in zip(acc_p, m.trainable()):
            a += p
        for a, s in zip(acc_s, m.running_stats()):
            a += s
    for dst, a in zip(out.trainable(), acc_p):
        dst[...] = a / n
    for layer, k in zip(out.bn_layers(), range(0, len(acc_s), 2)):
        layer.running_mean = acc_s[k] / n
        layer.running_var = acc_s[k + 1] / n
    return out
