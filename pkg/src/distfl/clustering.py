"""Response vectors, pairwise KL similarity matrix and threshold clustering."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels, nn
from .extraction import KnowledgeSet

PROB_FLOOR = 1e-12
# An auto-detected gap only splits when the divergence just above it is at
# least this many times the one just below it.
MIN_GAP_RATIO = 2.0


@dataclass
class ResponseVector:
    client_id: int
    blocks: np.ndarray  # [z x num_classes], one softmax output per knowledge item

    def flat(self) -> np.ndarray:
        return self.blocks.reshape(-1)


@dataclass
class SimilarityMatrix:
    div: np.ndarray
    raw: np.ndarray  # one-directional KL, kept even when div is symmetrised
    symmetrized: bool

    @property
    def n(self) -> int:
        return self.div.shape[0]

    def to_csv(self, raw: bool = False) -> str:
        m = self.raw if raw else self.div
        buf = io.StringIO()
        for row in m:
            buf.write(",".join(format(float(v), ".17g") for v in row))
            buf.write("\n")
        return buf.getvalue()


@dataclass
class ClusterAssignment:
    clusters: list  # list of sorted client-index lists
    threshold_used: float

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    def labels(self, n: Optional[int] = None) -> np.ndarray:
        n = sum(len(c) for c in self.clusters) if n is None else n
        out = np.full(n, -1, dtype=np.int64)
        for k, members in enumerate(self.clusters):
            out[list(members)] = k
        return out

    def cluster_of(self, client: int) -> int:
        for k, members in enumerate(self.clusters):
            if client in members:
                return k
        raise KeyError(client)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold_used, "clusters": [list(map(int, c)) for c in self.clusters]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterAssignment":
        return cls([list(map(int, c)) for c in d["clusters"]], float(d["threshold"]))

    @classmethod
    def from_labels(cls, labels: Sequence[int], threshold: float = math.nan) -> "ClusterAssignment":
        groups = {}
        for i, lab in enumerate(labels):
            groups.setdefault(lab, []).append(i)
        return cls(sorted(groups.values(), key=lambda g: g[0]), threshold)


def response_vector(model: nn.ModelParams, k: KnowledgeSet, client_id: int = 0) -> ResponseVector:
    if k.items.ndim != 2 or k.items.shape[1] != model.input_dim:
        raise nn.ShapeError(f"knowledge has dimension {k.items.shape[-1]}, model expects {model.input_dim}")
    probs = nn.forward(model, k.items, "eval").probs
    return ResponseVector(client_id, probs)


def kl_divergence(vp: ResponseVector, vq: ResponseVector, floor: float = PROB_FLOOR) -> float:
    """``sum_j p_j ln(p_j / q_j)`` over all blocks, logs of floor-clamped values."""
    p, q = vp.flat(), vq.flat()
    if p.shape != q.shape:
        raise ValueError(f"response lengths differ: {p.size} vs {q.size}")
    return float(np.sum(p * (np.log(np.maximum(p, floor)) - np.log(np.maximum(q, floor)))))


def build_sim(models: Sequence[nn.ModelParams], k: KnowledgeSet, symmetrize: bool = True) -> SimilarityMatrix:
    if not models:
        raise ValueError("need at least one model")
    resp = np.stack([response_vector(m, k, i).flat() for i, m in enumerate(models)])
    return sim_from_responses(resp, symmetrize)


def sim_from_responses(resp: np.ndarray, symmetrize: bool = True) -> SimilarityMatrix:
    raw = kernels.kl_matrix(resp, PROB_FLOOR)
    div = (raw + raw.T) / 2.0 if symmetrize else raw.copy()
    np.fill_diagonal(div, 0.0)
    return SimilarityMatrix(div, raw, symmetrize)


def auto_threshold(div: np.ndarray, min_gap_ratio: float = MIN_GAP_RATIO) -> Optional[float]:
    """Midpoint of the widest gap between sorted off-diagonal divergences.

    Returns None when there is no gap worth splitting on: fewer than two
    clients, all divergences within 1e-9 of each other, or the value above the
    widest gap is less than ``min_gap_ratio`` times the value below it.
    """
    n = div.shape[0]
    if n <= 1:
        return None
    vals = np.sort(div[~np.eye(n, dtype=bool)])
    if vals[-1] - vals[0] <= 1e-9:
        return None
    gaps = np.diff(vals)
    i = int(np.argmax(gaps))
    lo, hi = vals[i], vals[i + 1]
    if hi < min_gap_ratio * lo:
        return None
    return float((lo + hi) / 2.0)


def threshold_cluster(sim: SimilarityMatrix, threshold: Optional[float] = None,
                      min_gap_ratio: float = MIN_GAP_RATIO) -> ClusterAssignment:
    """Greedy anchor clustering.

    The lowest-indexed unassigned client anchors a new cluster that takes every
    unassigned client within ``threshold`` of it; repeat until everyone is
    placed. With no threshold one is picked by :func:`auto_threshold`, and if
    none is found the result is a single cluster.
    """
    n = sim.n
    div = sim.div
    if threshold is None:
        threshold = auto_threshold(div, min_gap_ratio)
        if threshold is None:
            top = float(div.max()) if n else 0.0
            return ClusterAssignment([list(range(n))], top)
    unassigned = list(range(n))
    clusters = []
    while unassigned:
        anchor = unassigned[0]
        members = [q for q in unassigned if q == anchor or div[anchor, q] <= threshold]
        clusters.append(members)
        taken = set(members)
        unassigned = [q for q in unassigned if q not in taken]
    return ClusterAssignment(clusters, float(threshold))
