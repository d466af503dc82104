"""Synthetic non-iid client data, poisoning attacks and DP noise."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .rng import stream

SCENARIOS = ("category_imbalance", "environment_shift", "attack_injection", "privacy_protection", "mixed")
ATTACKS = ("none", "label_flip", "model_replace")


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    dist_type: int = 0
    is_malicious: bool = False

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("a shard needs at least one sample")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per sample")
        if self.dist_type < 0:
            raise ValueError("dist_type must be >= 0")

    def __len__(self):
        return self.features.shape[0]

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "dist_type": self.dist_type,
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClientShard":
        return cls(
            int(d["client_id"]),
            np.array(d["features"], dtype=np.float64),
            np.array(d["labels"], dtype=np.int64),
            int(d.get("dist_type", 0)),
            bool(d.get("is_malicious", False)),
        )


@dataclass
class ScenarioConfig:
    scenario: str = "category_imbalance"
    num_types: int = 5
    clients_per_type: int = 4
    samples_per_client: int = 64
    num_classes: int = 10
    feature_dim: int = 16
    class_separation: float = 4.0
    shift_magnitude: float = 3.0
    test_samples_per_type: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.num_types < 1 or self.clients_per_type < 1:
            raise ValueError("num_types and clients_per_type must be >= 1")
        if self.samples_per_client < 1 or self.num_classes < 2 or self.feature_dim < 1:
            raise ValueError("invalid sizes")

    @property
    def num_clients(self) -> int:
        return self.num_types * self.clients_per_type


@dataclass
class AttackConfig:
    kind: str = "none"
    flip_map: dict = field(default_factory=dict)
    attacker_ids: list = field(default_factory=list)
    boost_factor: Optional[float] = None  # model replacement scale; None -> number of clients
    start_round: int = 0  # attackers behave honestly before this round

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"attack kind must be one of {ATTACKS}")
        if self.start_round < 0:
            raise ValueError("start_round must be >= 0")
        self.flip_map = {int(k): int(v) for k, v in self.flip_map.items()}
        for k, v in self.flip_map.items():
            if k == v:
                raise ValueError(f"flip_map has a fixed point at {k}")
        self.attacker_ids = sorted(int(i) for i in self.attacker_ids)

    def active(self, round_index: int) -> bool:
        return self.kind != "none" and round_index >= self.start_round


@dataclass
class DPConfig:
    epsilon: float = 1.0
    delta: float = 1e-5
    clip_norm: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")

    @property
    def sigma(self) -> float:
        return gaussian_sigma(self.epsilon, self.delta, self.clip_norm)


def class_means(num_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Class centres with pairwise distance ``separation``.

    Exact when ``dim >= num_classes`` (scaled orthonormal vectors), otherwise
    random unit directions scaled the same way.
    """
    if dim >= num_classes:
        q, r = np.linalg.qr(rng.normal(size=(dim, num_classes)))
        q = q * np.sign(np.diag(r))
        dirs = q.T
    else:
        dirs = rng.normal(size=(num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * (separation / math.sqrt(2.0))


def type_classes(cfg: ScenarioConfig) -> list:
    """Classes owned by each distribution type."""
    if cfg.scenario in ("category_imbalance", "mixed"):
        if cfg.num_classes < cfg.num_types:
            raise ValueError("category imbalance needs num_classes >= num_types")
        return [np.array(c, dtype=np.int64) for c in np.array_split(np.arange(cfg.num_classes), cfg.num_types)]
    return [np.arange(cfg.num_classes, dtype=np.int64) for _ in range(cfg.num_types)]


def type_shifts(cfg: ScenarioConfig) -> np.ndarray:
    """Additive feature shift per type: ``t * shift_magnitude`` along a random unit direction."""
    shifts = np.zeros((cfg.num_types, cfg.feature_dim))
    if cfg.scenario not in ("environment_shift", "privacy_protection"):
        return shifts
    rng = stream(cfg.seed, "shift")
    for t in range(cfg.num_types):
        u = rng.normal(size=cfg.feature_dim)
        shifts[t] = t * cfg.shift_magnitude * u / np.linalg.norm(u)
    return shifts


def _sample(classes, n, means, shift, rng):
    labels = rng.permutation(np.resize(classes, n))
    feats = means[labels] + shift + rng.normal(size=(n, means.shape[1]))
    return feats, labels.astype(np.int64)


def generate_scenario(cfg: ScenarioConfig):
    """Client shards and one held-out test shard per distribution type.

    Pure function of ``cfg`` (including its seed). Clients are numbered type by
    type: clients ``t*clients_per_type ... (t+1)*clients_per_type-1`` hold type ``t``.
    """
    owned = type_classes(cfg)
    means = class_means(cfg.num_classes, cfg.feature_dim, cfg.class_separation, stream(cfg.seed, "means"))
    shifts = type_shifts(cfg)
    shards = []
    for t in range(cfg.num_types):
        for k in range(cfg.clients_per_type):
            cid = t * cfg.clients_per_type + k
            x, y = _sample(owned[t], cfg.samples_per_client, means, shifts[t], stream(cfg.seed, "client", cid))
            shards.append(ClientShard(cid, x, y, t))
    tests = []
    for t in range(cfg.num_types):
        x, y = _sample(owned[t], cfg.test_samples_per_type, means, shifts[t], stream(cfg.seed, "test", t))
        tests.append(ClientShard(t, x, y, t))
    return shards, tests


def save_shards(shards: Sequence[ClientShard], path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in shards]))


def load_shards(path) -> list:
    return [ClientShard.from_dict(d) for d in json.loads(Path(path).read_text())]


# -- attacks -----------------------------------------------------------------


def default_flip_map(num_classes: int) -> dict:
    """Swap the first four classes with the next four (0<->4, ..., 3<->7)."""
    half = min(4, num_classes // 2)
    m = {}
    for s in range(half):
        m[s] = s + half
        m[s + half] = s
    return m


def flip_labels(shard: ClientShard, flip_map: dict) -> ClientShard:
    """Relabel per ``flip_map``; features are shared, not copied."""
    labels = shard.labels.copy()
    for src, dst in flip_map.items():
        labels[shard.labels == src] = dst
    return replace(shard, labels=labels, is_malicious=True)


def model_replacement(local_malicious: nn.ModelParams, global_prev: nn.ModelParams, n_clients: float) -> nn.ModelParams:
    """Scale the malicious update so plain averaging lands on the malicious model.

    ``p_rep = n * (p_mal - p_glob) + p_glob`` for trainable tensors; running
    statistics are taken from the malicious model as-is.
    """
    if not local_malicious.same_shape(global_prev):
        raise nn.ShapeError("models are not shape-compatible")
    arrays = [n_clients * (pm - pg) + pg for pm, pg in zip(local_malicious.trainable(), global_prev.trainable())]
    return local_malicious.with_trainable(arrays)


# -- differential privacy ----------------------------------------------------


def gaussian_sigma(epsilon: float, delta: float, clip_norm: float) -> float:
    """Gaussian-mechanism noise scale ``clip * sqrt(2 ln(1.25/delta)) / epsilon``."""
    if not epsilon > 0 or not clip_norm > 0:
        raise ValueError("epsilon and clip_norm must be positive")
    if math.isinf(epsilon):
        return 0.0
    return clip_norm * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def clip_update(update: Sequence[np.ndarray], clip_norm: float) -> list:
    norm = math.sqrt(sum(float(np.sum(u * u)) for u in update))
    scale = 1.0 if norm == 0.0 else min(1.0, clip_norm / norm)
    return [u * scale for u in update]


def add_dp_noise(update: Sequence[np.ndarray], dp: DPConfig, rng: np.random.Generator) -> list:
    """Clip the update to ``dp.clip_norm`` (L2, jointly) then add N(0, sigma^2) per coordinate."""
    if not dp.epsilon > 0 or not dp.clip_norm > 0:
        raise ValueError("epsilon and clip_norm must be positive")
    clipped = clip_update(update, dp.clip_norm)
    sigma = dp.sigma
    if sigma == 0.0:
        return clipped
    return [u + rng.normal(0.0, sigma, size=u.shape) for u in clipped]
