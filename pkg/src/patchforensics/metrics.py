"""Detection metrics: accuracy and rank-statistic ROC-AUC."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def compute_accuracy(preds: Iterable[tuple[int, int]]) -> float:
    """Fraction of (predicted_label, truth) pairs that agree."""
    preds = list(preds)
    if not preds:
        raise ValueError("accuracy of an empty prediction list")
    correct = sum(int(p) == int(t) for p, t in preds)
    return correct / len(preds)


def compute_auc(scores: Iterable[tuple[float, int]]) -> float:
    """ROC-AUC as the Mann-Whitney U statistic, ties counted as one half.

    Equals P(score of a random positive > score of a random negative).
    """
    pairs = list(scores)
    s = np.array([p[0] for p in pairs], np.float64)
    y = np.array([int(p[1]) for p in pairs])
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricReport:
    accuracy: float
    auc: float
    n: int
    mean_latency_ms: float
    config_fingerprint: str

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0 and 0.0 <= self.auc <= 1.0):
            raise MetricError("accuracy and auc must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(predictions: Sequence, truth: dict[str, int], fingerprint: str = "") -> MetricReport:
    """Score ``predictions`` (objects with image_id/score/label/elapsed_ms) against ``truth`` labels."""
    missing = [p.image_id for p in predictions if p.image_id not in truth]
    if missing:
        raise MetricError(f"no ground truth for {missing[:5]}")
    acc = compute_accuracy((p.label, truth[p.image_id]) for p in predictions)
    auc = compute_auc((p.score, truth[p.image_id]) for p in predictions)
    lat = float(np.mean([p.elapsed_ms for p in predictions]))
    return MetricReport(acc, auc, len(predictions), lat, fingerprint)
