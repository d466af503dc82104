"""Server-side distribution-knowledge extraction from BatchNorm statistics."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .rng import stream


class SynthesisDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"synthesis loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class ExtractionConfig:
    z: int = 200
    extract_ratio: float = 50.0  # percent of BN channels kept per layer
    synth_steps: int = 500
    synth_lr: float = 0.01  # step per item: inputs move by synth_lr * z * grad
    synth_batch: int = 0  # 0 -> the whole knowledge set is one batch
    squared_norm: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.extract_ratio <= 100:
            raise ValueError("extract_ratio must lie in (0, 100]")
        if self.synth_steps < 1 or not self.synth_lr > 0:
            raise ValueError("synth_steps and synth_lr must be positive")
        if self.synth_batch and self.synth_batch != self.z:
            raise ValueError("mini-batched synthesis is not supported; leave synth_batch at 0 or z")


@dataclass
class KnowledgeSet:
    items: np.ndarray  # [z x input_dim]
    source_model_hash: str
    final_loss: float
    initial_loss: float = math.nan

    def to_dict(self) -> dict:
        return {
            "items": self.items.tolist(),
            "final_loss": self.final_loss,
            "initial_loss": self.initial_loss,
            "source_model_hash": self.source_model_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgeSet":
        items = np.array(d["items"], dtype=np.float64)
        if items.ndim != 2 or not np.all(np.isfinite(items)):
            raise ValueError("knowledge items must be a finite 2-D array")
        return cls(items, d.get("source_model_hash", ""), float(d["final_loss"]), float(d.get("initial_loss", math.nan)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "KnowledgeSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def model_hash(model: nn.ModelParams) -> str:
    h = hashlib.sha256()
    for a in model.trainable() + model.running_stats():
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def pre_aggregate(models: Sequence[nn.ModelParams]) -> nn.ModelParams:
    """Plain average of all uploads, running statistics included."""
    return nn.average_models(models)


def select_channels(model: nn.ModelParams, extract_ratio: float) -> list:
    """Per BN layer, the ``ceil(E% * c)`` channels with the largest ``|gamma|``.

    Ties go to the lower channel index. Each subset is returned sorted.
    """
    bns = model.bn_layers()
    if not bns:
        raise nn.ShapeError("model has no BatchNorm layers")
    if not 0 < extract_ratio <= 100:
        raise ValueError("extract_ratio must lie in (0, 100]")
    out = []
    for layer in bns:
        c = layer.channels
        k = max(1, math.ceil(extract_ratio * c / 100.0 - 1e-9))
        order = np.argsort(-np.abs(layer.gamma), kind="stable")
        out.append(np.sort(order[:k]))
    return out


def synthesize(model: nn.ModelParams, cfg: ExtractionConfig) -> KnowledgeSet:
    """Optimise ``z`` Gaussian noise vectors so their BN statistics match the model's.

    Plain gradient descent on the inputs for ``synth_steps`` steps. The loss
    is a function of batch statistics, so its gradient w.r.t. one item shrinks
    like ``1/z``; the step is ``synth_lr * z`` to keep ``synth_lr`` independent
    of the batch size. The objective is the BN-match loss restricted to the
    channels picked by :func:`select_channels`. The model is only read.
    The returned items are the best iterate seen, so ``final_loss`` never
    exceeds the loss of the initial noise.
    """
    if cfg.z < 2:
        raise ValueError("z must be at least 2: batch variance is undefined for one item")
    selection = select_channels(model, cfg.extract_ratio)
    x = stream(cfg.seed, "synthesis").standard_normal((cfg.z, model.input_dim))
    loss, grad = nn.bn_match_loss_and_input_grad(model, x, selection, cfg.squared_norm)
    initial = loss
    best_loss, best_x = loss, x
    step_size = cfg.synth_lr * cfg.z
    for step in range(1, cfg.synth_steps + 1):
        x = x - step_size * grad
        try:
            loss, grad = nn.bn_match_loss_and_input_grad(model, x, selection, cfg.squared_norm)
        except nn.NonFiniteError:
            raise SynthesisDiverged(step, math.nan) from None
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise SynthesisDiverged(step, loss)
        if loss < best_loss:
            best_loss, best_x = loss, x
    return KnowledgeSet(best_x, model_hash(model), best_loss, initial)
