"""Evaluation metrics: accuracy, attack success rate, cluster recovery, weight divergence."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .scenario import ClientShard


@dataclass
class MetricsConfig:
    asr_target_map: dict = field(default_factory=dict)  # source class -> attacker's target class
    evaluate_on: str = "normal_cluster_model"

    def __post_init__(self):
        if self.evaluate_on not in ("normal_cluster_model", "per_client_model"):
            raise ValueError("evaluate_on must be normal_cluster_model or per_client_model")
        self.asr_target_map = {int(k): int(v) for k, v in self.asr_target_map.items()}

    @property
    def asr_source_classes(self) -> list:
        return sorted(self.asr_target_map)


def accuracy(model: nn.ModelParams, test: ClientShard) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = nn.predict(model, test.features)
    return float(np.count_nonzero(pred == test.labels)) / len(test)


def attack_success_rate(model: nn.ModelParams, test: ClientShard, cfg: MetricsConfig) -> float:
    """Mean over source classes of the fraction predicted as that class's target."""
    if not cfg.asr_target_map:
        raise ValueError("no source classes configured")
    pred = nn.predict(model, test.features)
    rates = []
    for src in cfg.asr_source_classes:
        mask = test.labels == src
        n = int(np.count_nonzero(mask))
        if n == 0:
            raise ValueError(f"test set has no samples of source class {src}")
        rates.append(np.count_nonzero(pred[mask] == cfg.asr_target_map[src]) / n)
    return float(np.mean(rates))


def _comb2(x):
    return x * (x - 1) / 2.0


def adjusted_rand_index(pred: Sequence[int], truth: Sequence[int]) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError("partitions cover different numbers of items")
    n = pred.size
    if n < 2:
        return 1.0
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1))
    np.add.at(table, (pi, ti), 1)
    index = _comb2(table).sum()
    a = _comb2(table.sum(axis=1)).sum()
    b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = a * b / total
    max_index = (a + b) / 2.0
    if max_index == expected:
        # both partitions trivial in the same way (all singletons or one block)
        return 1.0
    return float((index - expected) / (max_index - expected))


def cluster_recovery(assignment, truth: Sequence[int]) -> float:
    """``max(0, ARI)`` between a ClusterAssignment and ground-truth type labels."""
    labels = assignment.labels(len(truth))
    if np.any(labels < 0):
        raise ValueError("assignment does not cover every client")
    return max(0.0, adjusted_rand_index(labels, truth))


def exact_recovery(assignment, truth: Sequence[int]) -> bool:
    return adjusted_rand_index(assignment.labels(len(truth)), truth) == 1.0


def weight_divergence(models: Sequence[nn.ModelParams]) -> dict:
    """Mean and max pairwise L2 distance of the flattened trainable parameters."""
    if len(models) < 2:
        raise ValueError("weight divergence needs at least two models")
    flat = [m.flat_params() for m in models]
    dists = [float(np.linalg.norm(a - b)) for a, b in itertools.combinations(flat, 2)]
    return {"mean": math.fsum(dists) / len(dists), "max": max(dists)}
