"""Multi-round federated training under DistFL and baseline strategies."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .clustering import MIN_GAP_RATIO, ClusterAssignment, SimilarityMatrix, build_sim, threshold_cluster
from .extraction import ExtractionConfig, KnowledgeSet, SynthesisDiverged, pre_aggregate, synthesize
from .metrics import MetricsConfig, accuracy, attack_success_rate, cluster_recovery, exact_recovery, weight_divergence
from .report import RoundReport
from .rng import stream
from .scenario import (
    AttackConfig,
    ClientShard,
    DPConfig,
    ScenarioConfig,
    add_dp_noise,
    flip_labels,
    generate_scenario,
    model_replacement,
)

log = logging.getLogger(__name__)

STRATEGIES = ("distfl", "fedavg_global", "local_only", "oracle_cluster")


class RoundError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    dp: Optional[DPConfig] = None
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    strategy: str = "distfl"
    rounds: int = 50
    seed: int = 0
    hidden: list = field(default_factory=lambda: [16, 16])
    threshold: Optional[float] = None  # None -> auto-detect every round
    min_gap_ratio: float = MIN_GAP_RATIO
    symmetrize: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        n = self.scenario.num_clients
        if any(i < 0 or i >= n for i in self.attack.attacker_ids):
            raise ValueError("attacker_ids must be valid client ids")


@dataclass
class FLState:
    round: int
    cluster_models: list  # the models currently deployed, one per cluster
    client_cluster: list  # client index -> index into cluster_models
    global_prev: nn.ModelParams  # last pre-aggregated model (model-replacement baseline)
    history: list = field(default_factory=list)  # ClusterAssignment per completed round

    def model_for(self, client: int) -> nn.ModelParams:
        return self.cluster_models[self.client_cluster[client]]

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "cluster_models": [nn.model_to_dict(m) for m in self.cluster_models],
            "client_cluster": list(self.client_cluster),
            "global_prev": nn.model_to_dict(self.global_prev),
            "history": [a.to_dict() for a in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FLState":
        return cls(
            int(d["round"]),
            [nn.model_from_dict(m) for m in d["cluster_models"]],
            [int(c) for c in d["client_cluster"]],
            nn.model_from_dict(d["global_prev"]),
            [ClusterAssignment.from_dict(a) for a in d["history"]],
        )


@dataclass
class RoundArtifacts:
    uploads: list
    assignment: ClusterAssignment
    global_model: nn.ModelParams
    knowledge: Optional[KnowledgeSet] = None
    sim: Optional[SimilarityMatrix] = None
    train_losses: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def sub_seed(*parts) -> int:
    """Fold several integers into one 63-bit seed."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def initial_state(cfg: ExperimentConfig) -> FLState:
    sc = cfg.scenario
    model = nn.init_model(sc.feature_dim, cfg.hidden, sc.num_classes, stream(cfg.seed, "init"))
    return FLState(0, [model], [0] * sc.num_clients, model, [])


def ground_truth(shards: Sequence[ClientShard]) -> list:
    """Evaluation-only partition: distribution type, split by benign/malicious."""
    keys = {}
    return [keys.setdefault((s.dist_type, s.is_malicious), len(keys)) for s in shards]


def prepare_shards(shards: Sequence[ClientShard], attack: AttackConfig) -> list:
    """Mark attackers; label-flip attackers get their corrupted labels here."""
    out = []
    for s in shards:
        if s.client_id in attack.attacker_ids and attack.kind != "none":
            if attack.kind == "label_flip" or attack.flip_map:
                s = flip_labels(s, attack.flip_map)
            else:
                s = replace(s, is_malicious=True)
        out.append(s)
    return out


def local_train(shard: ClientShard, model: nn.ModelParams, cfg: nn.TrainConfig, rng: np.random.Generator):
    """``local_epochs`` passes of momentum SGD over a seeded shuffle.

    Velocity starts at zero. A trailing mini-batch of a single sample is folded
    into the previous one since BN batch statistics need two rows. Returns the
    new model and the mean training loss of each epoch.
    """
    model = model.copy()
    x, y = shard.features, shard.labels
    n = len(shard)
    velocity = nn.GradientSet.zeros_like(model)
    epoch_losses = []
    starts = list(range(0, n, cfg.batch_size))
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        losses = []
        for j, s in enumerate(starts):
            stop = starts[j + 1] if j + 1 < len(starts) else n
            idx = order[s:stop]
            if len(idx) < 2:
                continue
            loss, grads = nn.loss_and_grads(model, x[idx], y[idx])
            nn.update_running_stats(model, grads.batch_stats)
            model, velocity = nn.sgd_step(model, grads, velocity, cfg)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)) if losses else math.nan)
    return model, epoch_losses


def cluster_aggregate(models: Sequence[nn.ModelParams], assignment: ClusterAssignment) -> list:
    """One averaged model per cluster, members summed in ascending index order."""
    covered = sorted(i for c in assignment.clusters for i in c)
    if covered != list(range(len(models))):
        raise ValueError("assignment must partition all model indices")
    out = []
    for members in assignment.clusters:
        if not members:
            raise ValueError("empty cluster")
        out.append(nn.average_models([models[i] for i in sorted(members)]))
    return out


def _upload(i, shard, received, state, cfg, n_clients):
    attack = cfg.attack
    replacing = attack.kind == "model_replace" and i in attack.attacker_ids and attack.active(state.round)
    if replacing:
        # the replacement is computed against the last pre-aggregated model, so
        # the malicious model is trained from it too (not from the attacker's
        # own boosted cluster model, which would compound every round)
        received = state.global_prev
    trained, losses = local_train(shard, received, cfg.train, stream(cfg.seed, "train", i, state.round))
    upload = trained
    if replacing:
        boost = attack.boost_factor if attack.boost_factor else n_clients
        upload = model_replacement(trained, state.global_prev, boost)
    if cfg.dp is not None:
        delta = [u - r for u, r in zip(upload.trainable(), received.trainable())]
        noisy = add_dp_noise(delta, cfg.dp, stream(cfg.seed, "dp", i, state.round))
        upload = upload.with_trainable([r + d for r, d in zip(received.trainable(), noisy)])
    return upload, losses


def run_round(state: FLState, cfg: ExperimentConfig, shards: Sequence[ClientShard],
              clean: Optional[Sequence[ClientShard]] = None):
    """Advance one round. Returns ``(new_state, RoundArtifacts)``; ``state`` is untouched.

    ``clean`` holds the uncorrupted shards; attackers train on them before
    ``attack.start_round``.
    """
    n = len(shards)
    timings = {}
    t0 = time.perf_counter()
    uploads = []
    train_losses = []
    dormant = set() if cfg.attack.active(state.round) else set(cfg.attack.attacker_ids)
    if dormant and clean is None:
        raise ValueError("attackers are dormant this round but no clean shards were given")
    for i, shard in enumerate(shards):
        if i in dormant:
            shard = clean[i]
        up, losses = _upload(i, shard, state.model_for(i), state, cfg, n)
        uploads.append(up)
        train_losses.append(losses[-1])
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    global_model = pre_aggregate(uploads)
    knowledge = sim = None
    if cfg.strategy == "distfl":
        ext = replace(cfg.extraction, seed=sub_seed(cfg.seed, cfg.extraction.seed, state.round))
        try:
            knowledge = synthesize(global_model, ext)
        except SynthesisDiverged as exc:
            raise RoundError(f"round {state.round}: {exc}") from exc
        timings["extract"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        sim = build_sim(uploads, knowledge, cfg.symmetrize)
        assignment = threshold_cluster(sim, cfg.threshold, cfg.min_gap_ratio)
        timings["cluster"] = time.perf_counter() - t0
    elif cfg.strategy == "fedavg_global":
        assignment = ClusterAssignment([list(range(n))], math.nan)
    elif cfg.strategy == "local_only":
        assignment = ClusterAssignment([[i] for i in range(n)], math.nan)
    else:
        assignment = ClusterAssignment.from_labels(ground_truth(shards))

    t0 = time.perf_counter()
    if cfg.strategy == "fedavg_global":
        models = [global_model]
    elif cfg.strategy == "local_only":
        models = list(uploads)
    else:
        models = cluster_aggregate(uploads, assignment)
    timings["aggregate"] = time.perf_counter() - t0

    new_state = FLState(
        state.round + 1,
        models,
        [int(c) for c in assignment.labels(n)],
        global_model,
        state.history + [assignment],
    )
    log.debug("round %d: %d clusters", state.round, assignment.num_clusters)
    return new_state, RoundArtifacts(uploads, assignment, global_model, knowledge, sim, train_losses, timings)


def normal_cluster(assignment: ClusterAssignment, shards: Sequence[ClientShard]) -> int:
    """Cluster with the most benign clients (lowest index on ties)."""
    counts = [sum(not shards[i].is_malicious for i in c) for c in assignment.clusters]
    return int(np.argmax(counts))


def metrics_config(attack: AttackConfig) -> Optional[MetricsConfig]:
    if attack.kind == "none" or not attack.flip_map:
        return None
    return MetricsConfig(dict(attack.flip_map))


def evaluate(state: FLState, art: RoundArtifacts, cfg: ExperimentConfig, shards, tests, round_index: int) -> RoundReport:
    t0 = time.perf_counter()
    n = len(shards)
    assignment = art.assignment
    truth = ground_truth(shards)
    mcfg = metrics_config(cfg.attack)

    per_client = [accuracy(state.model_for(i), tests[shards[i].dist_type]) for i in range(n)]
    benign = [i for i in range(n) if not shards[i].is_malicious]
    types = sorted({shards[i].dist_type for i in benign})
    per_type = {t: float(np.mean([per_client[i] for i in benign if shards[i].dist_type == t])) for t in types}

    per_cluster = []
    for k, members in enumerate(assignment.clusters):
        model = state.cluster_models[state.client_cluster[members[0]]]
        member_types = sorted({shards[i].dist_type for i in members})
        entry = {
            "members": list(members),
            "malicious": [i for i in members if shards[i].is_malicious],
            "accuracy": float(np.mean([accuracy(model, tests[t]) for t in member_types])),
        }
        if mcfg is not None:
            entry["asr"] = float(np.mean([attack_success_rate(model, tests[t], mcfg) for t in member_types]))
        per_cluster.append(entry)

    normal = normal_cluster(assignment, shards)
    if mcfg is not None:
        headline_acc = per_cluster[normal]["accuracy"]
        asr = per_cluster[normal]["asr"]
    else:
        headline_acc = float(np.mean(list(per_type.values())))
        asr = None

    attackers = {i for i in range(n) if shards[i].is_malicious}
    within = [weight_divergence([art.uploads[i] for i in c])["mean"] for c in assignment.clusters if len(c) > 1]
    wd = weight_divergence(art.uploads) if n > 1 else {"mean": 0.0, "max": 0.0}
    wd = {"all_mean": wd["mean"], "all_max": wd["max"], "within_cluster_mean": float(np.mean(within)) if within else 0.0}

    timings = dict(art.timings)
    timings["evaluate"] = time.perf_counter() - t0
    return RoundReport(
        round=round_index,
        strategy=cfg.strategy,
        per_client_accuracy=per_client,
        per_type_accuracy={str(t): a for t, a in per_type.items()},
        mean_accuracy=float(np.mean(list(per_type.values()))),
        headline_accuracy=headline_acc,
        asr=asr,
        clusters=[list(c) for c in assignment.clusters],
        threshold=assignment.threshold_used,
        normal_cluster=normal,
        attackers_isolated=bool(attackers) and not (attackers & set(assignment.clusters[normal])),
        cluster_recovery=cluster_recovery(assignment, truth),
        exact_recovery=exact_recovery(assignment, truth),
        per_cluster=per_cluster,
        weight_divergence=wd,
        synthesis_final_loss=art.knowledge.final_loss if art.knowledge else None,
        synthesis_initial_loss=art.knowledge.initial_loss if art.knowledge else None,
        train_loss=float(np.mean(art.train_losses)),
        timings=timings,
    )


def effective_scenario(cfg: ExperimentConfig) -> ScenarioConfig:
    return replace(cfg.scenario, seed=sub_seed(cfg.seed, cfg.scenario.seed))


def build_data(cfg: ExperimentConfig):
    """``(shards, tests, clean)``: attacker-prepared shards, per-type test sets, uncorrupted shards."""
    clean, tests = generate_scenario(effective_scenario(cfg))
    return prepare_shards(clean, cfg.attack), tests, clean


def run_experiment(
    cfg: ExperimentConfig,
    on_round: Optional[Callable] = None,
    start: Optional[FLState] = None,
) -> list:
    """Run ``cfg.rounds`` rounds (continuing from ``start`` if given) and evaluate after each.

    ``on_round(state, artifacts, report)`` is called after every round.
    """
    shards, tests, clean = build_data(cfg)
    state = start if start is not None else initial_state(cfg)
    reports = []
    while state.round < cfg.rounds:
        r = state.round
        state, art = run_round(state, cfg, shards, clean)
        report = evaluate(state, art, cfg, shards, tests, r)
        reports.append(report)
        if on_round is not None:
            on_round(state, art, report)
    return reports
