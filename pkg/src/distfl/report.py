"""Per-round reports and their JSON/CSV serialisation."""

from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional


def _clean(v):
    # JSON has no NaN/Infinity; encode them as strings so output stays standard
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _unclean(v):
    if v in ("nan", "inf", "-inf"):
        return float(v)
    return v


@dataclass
class RoundReport:
    round: int
    strategy: str
    per_client_accuracy: list
    per_type_accuracy: dict
    mean_accuracy: float
    headline_accuracy: float
    asr: Optional[float]
    clusters: list
    threshold: float
    normal_cluster: int
    attackers_isolated: bool
    cluster_recovery: float
    exact_recovery: bool
    per_cluster: list
    weight_divergence: dict
    synthesis_final_loss: Optional[float]
    synthesis_initial_loss: Optional[float]
    train_loss: float
    timings: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_timings:
            del d["timings"]
        return _clean(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        d = dict(d)
        for key in ("threshold", "synthesis_final_loss", "synthesis_initial_loss", "train_loss"):
            d[key] = _unclean(d.get(key))
        d.setdefault("timings", {})
        return cls(**d)


def reports_to_json(reports, include_timings: bool = False) -> str:
    """Canonical report document. Timings are off by default so reruns compare byte-for-byte."""
    return json.dumps({"rounds": [r.to_dict(include_timings) for r in reports]}, indent=1, sort_keys=True)


def reports_from_json(text: str) -> list:
    return [RoundReport.from_dict(d) for d in json.loads(text)["rounds"]]


def metrics_csv(reports, shards) -> str:
    """One row per round per client."""
    buf = io.StringIO()
    buf.write("round,client_id,dist_type,is_malicious,cluster,accuracy\n")
    for r in reports:
        cluster_of = {i: k for k, c in enumerate(r.clusters) for i in c}
        for i, acc in enumerate(r.per_client_accuracy):
            s = shards[i]
            buf.write(f"{r.round},{s.client_id},{s.dist_type},{int(s.is_malicious)},{cluster_of[i]},{format(acc, '.17g')}\n")
    return buf.getvalue()
