"""
Ranking and Classification Metrics

Recall@M and NDCG@M with binary gains for link prediction, accuracy and F1
(through scikit-learn) for node classification.
"""

from typing import Collection, Dict, Sequence

import numpy as np
from sklearn.metrics import accuracy_score, f1_score


def _check(targets: Collection, m: int) -> None:
    if not targets:
        raise ValueError("ranking metrics need at least one target")
    if m <= 0:
        raise ValueError(f"cut-off M must be positive, got {m}")


def recall_at_m(ranked: Sequence, targets: Collection, m: int) -> float:
    """|top-M ∩ targets| / |targets|"""
    _check(targets, m)
    targets = set(targets)
    hits = sum(1 for item in ranked[:m] if item in targets)
    return hits / len(targets)


def dcg_at_m(ranked: Sequence, targets: Collection, m: int) -> float:
    targets = set(targets)
    return float(sum(1.0 / np.log2(rank + 1)
                     for rank, item in enumerate(ranked[:m], start=1) if item in targets))


def ndcg_at_m(ranked: Sequence, targets: Collection, m: int) -> float:
    """
    NDCG@M with binary gains.

    DCG sums 1/log2(r+1) over hit ranks r ≤ M and is normalized by the ideal
    DCG of min(|targets|, M) hits at the top.
    """
    _check(targets, m)
    ideal = float(sum(1.0 / np.log2(rank + 1) for rank in range(1, min(len(set(targets)), m) + 1)))
    return dcg_at_m(ranked, targets, m) / ideal


def ranking_metrics(rankings: Dict[int, Sequence], targets: Dict[int, Collection],
                    recall_at: Sequence[int], ndcg_at: Sequence[int]) -> Dict[str, float]:
    """Mean Recall@M and NDCG@M over every node with targets."""
    nodes = [k for k in rankings if targets.get(k)]
    if not nodes:
        raise ValueError("no evaluation node has targets")
    out: Dict[str, float] = {}
    for m in recall_at:
        out[f"recall@{m}"] = float(np.mean([recall_at_m(rankings[k], targets[k], m) for k in nodes]))
    for m in ndcg_at:
        out[f"ndcg@{m}"] = float(np.mean([ndcg_at_m(rankings[k], targets[k], m) for k in nodes]))
    return out


def classification_metrics(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> Dict[str, float]:
    """Accuracy plus F1 (binary for two classes, macro otherwise)."""
    if len(y_true) == 0:
        raise ValueError("no labeled evaluation nodes")
    average = "binary" if num_classes == 2 else "macro"
    labels = None if num_classes == 2 else list(range(num_classes))
    return {
        "accuracy": float(accuracy_score(y_true, y_pred)),
        "f1": float(f1_score(y_true, y_pred, average=average, labels=labels, zero_division=0)),
    }
