"""
Loss-curve plots from the JSON-Lines training log, written as SVG.
"""

import json
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_training_log(path: str) -> List[Dict]:
    """All epoch records of a training log, in file order."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def loss_series(records: List[Dict]) -> Dict[str, List[Tuple[int, float]]]:
    """
    Per-objective (step, mean loss) points.

    Epochs of all phases are laid out on one running step axis; objectives
    are keyed as ``phase/objective``.
    """
    series: Dict[str, List[Tuple[int, float]]] = defaultdict(list)
    for step, record in enumerate(records):
        for objective, value in record.get("losses", {}).items():
            if value is not None:
                series[f"{record['phase']}/{objective}"].append((step, value))
    return dict(series)


def plot_losses(log_path: str, out_path: str) -> int:
    """
    Write an SVG of per-objective epoch losses.

    Returns:
        Number of plotted series
    """
    series = loss_series(read_training_log(log_path))
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name, points in sorted(series.items()):
        steps, values = zip(*points)
        ax.plot(steps, values, marker="o", markersize=2, linewidth=1, label=name)
    ax.set_xlabel("epoch (all phases)")
    ax.set_ylabel("mean loss")
    ax.grid(alpha=0.3)
    if series:
        ax.legend(fontsize="small")
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    return len(series)
