"""Continual-learning metric suite: IoU, BWT, FWT, and part-count voting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, MissingDataError
from .stream import Taxonomy


@dataclass
class IoUTable:
    """Per (episode, class) IoU values plus individual-training baselines.

    Values are stored as given (the harness writes fractions in [0, 1];
    published tables in percent work just as well since the transfer metrics
    are scale-free differences). Presentation rounds to two decimals; the
    stored values stay full float64.
    """

    values: dict[tuple[int, str], float] = field(default_factory=dict)
    ind: dict[str, float] = field(default_factory=dict)

    def set(self, episode: int, class_id: str, value: float) -> None:
        self.values[(episode, class_id)] = float(value)

    def get(self, episode: int, class_id: str) -> float:
        key = (episode, class_id)
        if key not in self.values:
            raise MissingDataError(f"no IoU entry for episode {episode}, class {class_id!r}")
        return self.values[key]

    def episodes(self) -> list[int]:
        return sorted({t for t, _ in self.values})

    def classes(self) -> list[str]:
        return sorted({c for _, c in self.values} | set(self.ind))


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; empty vs empty is 1.0."""
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def bwt(table: IoUTable, t: int, taxonomy: Taxonomy) -> float:
    """Mean IoU change on old and regular classes between episodes t-1 and t."""
    tracked = sorted(taxonomy.old | taxonomy.regular)
    if not tracked:
        raise MissingDataError(f"no old or regular classes at episode {t}")
    deltas = []
    for c in tracked:
        deltas.append(table.get(t, c) - table.get(t - 1, c))
    return float(np.mean(deltas))


def fwt(table: IoUTable, t: int, taxonomy: Taxonomy) -> float:
    """Mean IoU gain of episode-t new classes over their individual baselines."""
    new = sorted(taxonomy.new)
    if not new:
        raise MissingDataError(f"no new classes at episode {t}")
    deltas = []
    for c in new:
        if c not in table.ind:
            raise MissingDataError(f"no individual-training baseline for class {c!r}")
        deltas.append(table.get(t, c) - table.ind[c])
    return float(np.mean(deltas))


def majority_vote_part_count(responses: dict[str, dict[int, int]]) -> dict[str, int]:
    """Most frequent part count per class; frequency ties go to the smaller count."""
    result = {}
    for class_id in sorted(responses):
        votes = responses[class_id]
        if not votes:
            raise MissingDataError(f"no part-count responses for class {class_id!r}")
        best = min(votes, key=lambda count: (-votes[count], count))
        result[class_id] = int(best)
    return result


def table_to_csv(table: IoUTable) -> str:
    """Presentation CSV: one row per class, one column per episode plus 'ind'.

    Values are rounded to two decimals here only; the table itself keeps
    full precision.
    """
    episodes = table.episodes()
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["class"] + [f"t{t}" for t in episodes] + ["ind"])
    for c in table.classes():
        row = [c]
        for t in episodes:
            row.append(f"{table.values[(t, c)]:.2f}" if (t, c) in table.values else "")
        row.append(f"{table.ind[c]:.2f}" if c in table.ind else "")
        writer.writerow(row)
    return out.getvalue()


def table_to_document(table: IoUTable) -> dict:
    return {
        "values": {f"{t}/{c}": v for (t, c), v in sorted(table.values.items())},
        "ind": {c: v for c, v in sorted(table.ind.items())},
    }


def table_from_document(doc: dict) -> IoUTable:
    table = IoUTable()
    for key, v in doc["values"].items():
        t, c = key.split("/", 1)
        table.values[(int(t), c)] = float(v)
    table.ind = {c: float(v) for c, v in doc["ind"].items()}
    return table
