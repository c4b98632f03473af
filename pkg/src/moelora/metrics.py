"""Micro-F1, Macro-F1 and ROUGE-L, plus the cross-task average."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

from moelora.errors import ConfigError

METRICS = ("micro_f1", "macro_f1", "rouge_l")


@dataclass(frozen=True)
class ConfusionCounts:
    classes: tuple
    tp: dict
    fp: dict
    tn: dict
    fn: dict

    @property
    def total(self) -> int:
        k = self.classes[0]
        return self.tp[k] + self.fp[k] + self.tn[k] + self.fn[k]


def confusion_counts(preds: Sequence[Hashable], golds: Sequence[Hashable]) -> ConfusionCounts:
    """Per-class one-vs-rest counts over the union of predicted and gold classes."""
    if len(preds) != len(golds):
        raise ConfigError(f"{len(preds)} predictions for {len(golds)} references")
    if not golds:
        raise ConfigError("cannot score an empty evaluation set")
    classes = tuple(dict.fromkeys(list(golds) + list(preds)))
    n = len(golds)
    pred_c, gold_c = Counter(preds), Counter(golds)
    tp = Counter(g for p, g in zip(preds, golds) if p == g)
    TP = {k: tp[k] for k in classes}
    FP = {k: pred_c[k] - tp[k] for k in classes}
    FN = {k: gold_c[k] - tp[k] for k in classes}
    TN = {k: n - TP[k] - FP[k] - FN[k] for k in classes}
    return ConfusionCounts(classes, TP, FP, TN, FN)


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def micro_f1(preds, golds) -> float:
    c = confusion_counts(preds, golds)
    tp = sum(c.tp.values())
    fp = sum(c.fp.values())
    fn = sum(c.fn.values())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return _f1(p, r)


def macro_f1(preds, golds) -> float:
    """F1 of class-averaged precision and recall (averaging happens first)."""
    c = confusion_counts(preds, golds)
    k = len(c.classes)
    p = sum(c.tp[x] / (c.tp[x] + c.fp[x]) if c.tp[x] + c.fp[x] else 0.0 for x in c.classes) / k
    r = sum(c.tp[x] / (c.tp[x] + c.fn[x]) if c.tp[x] + c.fn[x] else 0.0 for x in c.classes) / k
    return _f1(p, r)


def lcs_len(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(gold: Sequence, gen: Sequence, beta: float = 1.0) -> float:
    """LCS-based F-measure (1+b^2) R P / (R + b^2 P)."""
    if not gold:
        raise ConfigError("ROUGE-L needs a nonempty reference")
    if not gen:
        return 0.0
    lcs = lcs_len(gold, gen)
    if lcs == 0:
        return 0.0
    r, p = lcs / len(gold), lcs / len(gen)
    b2 = beta * beta
    return (1 + b2) * r * p / (r + b2 * p)


@dataclass(frozen=True)
class TaskScore:
    task_id: str
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ConfigError(f"score {self.value} outside [0, 1]")


def average_score(scores: Sequence[TaskScore]) -> float:
    ids = [s.task_id for s in scores]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate task ids in score list")
    if not scores:
        raise ConfigError("no scores to average")
    return sum(s.value for s in scores) / len(scores)
