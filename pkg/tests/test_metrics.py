import math
import random

import pytest

from metrics import classification_metrics, ndcg_at_m, ranking_metrics, recall_at_m


def reference_recall(ranked, targets, m):
    top = ranked[:m]
    return len([t for t in targets if t in top]) / len(targets)


def reference_ndcg(ranked, targets, m):
    gains = [1.0 if item in targets else 0.0 for item in ranked[:m]]
    dcg = sum(g / math.log2(i + 2) for i, g in enumerate(gains))
    ideal = sorted([1.0] * len(targets) + [0.0] * m, reverse=True)[:m]
    return dcg / sum(g / math.log2(i + 2) for i, g in enumerate(ideal))


def test_hand_cases():
    assert recall_at_m(["a", "b", "c", "d"], {"a", "e"}, 2) == 0.5
    assert ndcg_at_m(["b", "a", "c"], {"a"}, 3) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_m(["a", "b"], {"a"}, 2) == 1.0
    assert recall_at_m(["a"], {"b"}, 5) == 0.0


def test_ideal_dcg_caps_at_m():
    assert ndcg_at_m([1, 2], {1, 2, 3, 4}, 2) == pytest.approx(1.0)
    assert recall_at_m([1, 2], {1, 2, 3, 4}, 2) == 0.5


def test_matches_brute_force_reference():
    rng = random.Random(0)
    for _ in range(1000):
        universe = list(range(rng.randint(1, 40)))
        ranked = rng.sample(universe, rng.randint(0, len(universe)))
        targets = set(rng.sample(universe, rng.randint(1, len(universe))))
        m = rng.randint(1, 45)
        assert recall_at_m(ranked, targets, m) == pytest.approx(reference_recall(ranked, targets, m), abs=1e-12)
        assert ndcg_at_m(ranked, targets, m) == pytest.approx(reference_ndcg(ranked, targets, m), abs=1e-12)


@pytest.mark.parametrize("targets, m", [(set(), 3), ({1}, 0)])
def test_rejects_degenerate_inputs(targets, m):
    with pytest.raises(ValueError):
        recall_at_m([1, 2], targets, m)
    with pytest.raises(ValueError):
        ndcg_at_m([1, 2], targets, m)


def test_ranking_metrics_average_over_nodes():
    rankings = {1: [5, 6, 7], 2: [7, 6, 5], 3: [5]}
    targets = {1: {5}, 2: {5}, 3: set()}
    out = ranking_metrics(rankings, targets, recall_at=[1, 3], ndcg_at=[3])
    assert out["recall@1"] == 0.5
    assert out["recall@3"] == 1.0
    assert out["ndcg@3"] == pytest.approx((1.0 + 0.5) / 2)
    with pytest.raises(ValueError):
        ranking_metrics({1: [5]}, {1: set()}, [1], [1])


def test_classification_metrics():
    binary = classification_metrics([1, 0, 1, 1], [1, 0, 0, 1], num_classes=2)
    assert binary["accuracy"] == 0.75
    assert binary["f1"] == pytest.approx(0.8)
    multi = classification_metrics([0, 1, 2], [0, 1, 1], num_classes=3)
    assert multi["f1"] == pytest.approx((1.0 + 2 / 3 + 0.0) / 3)
    with pytest.raises(ValueError):
        classification_metrics([], [], 2)
