"""Voxel-level F1 / precision / recall."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(probs, labels, threshold: float = 0.5) -> ConfusionCounts:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError(f"prediction shape {probs.shape} does not match label shape {labels.shape}")
    pred = probs >= threshold
    truth = labels.astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, int(truth.size - tp - fp - fn))


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def scores(c: ConfusionCounts) -> Dict[str, float]:
    return {"f1": f1(c), "precision": precision(c), "recall": recall(c)}


def aggregate(records: Sequence[Dict[str, float]], keys=("f1", "precision", "recall")) -> Dict[str, float]:
    """Mean and population standard deviation of each metric across volumes."""
    out: Dict[str, float] = {}
    for k in keys:
        vals = np.array([r[k] for r in records], dtype=np.float64)
        out[k] = float(vals.mean()) if vals.size else 0.0
        out[f"{k}_std"] = float(vals.std()) if vals.size else 0.0
    return out


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
