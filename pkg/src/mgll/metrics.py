"""Multi-label evaluation: ROC-AUC, average precision, category accuracy.

AUC uses the Mann-Whitney statistic with ties counted as half-concordant;
average precision ranks by descending score with ties broken by ascending
original index. Macro averages weigh every non-degenerate category equally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AllCategoriesDegenerate,
    DegenerateLabels,
    NoPositives,
    ShapeMismatch,
)
from .numerics import sigmoid


@dataclass
class ScoredLabels:
    scores: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.scores.shape != self.truth.shape:
            raise ShapeMismatch(
                f"scores {self.scores.shape} vs truth {self.truth.shape}"
            )
        if self.scores.ndim != 2:
            raise ShapeMismatch("scores must be samples x categories")
        if not np.all((self.truth == 0) | (self.truth == 1)):
            raise ShapeMismatch("truth entries must be 0 or 1")


@dataclass
class MetricsReport:
    auc: float
    map: float
    acc: float
    per_category: list[dict]
    skipped_categories: list[int]

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "map": self.map,
            "acc": self.acc,
            "per_category": self.per_category,
            "skipped_categories": self.skipped_categories,
        }


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1
    return ranks


def roc_auc(scores, truth) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied pairs) / (pos * neg)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    pos = truth == 1
    n_pos = int(pos.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(
            f"AUC needs positives and negatives, got {n_pos}/{n_neg}"
        )
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, truth) -> float:
    """Mean precision at each positive's rank, descending scores.

    Ties break by ascending original index, so results are deterministic.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    n_pos = int((truth == 1).sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if truth[idx] == 1:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / n_pos


def evaluate(scored: ScoredLabels, threshold: float = 0.5) -> MetricsReport:
    """Macro metrics over categories of a scored multi-label matrix.

    Categories lacking both classes are skipped for AUC (and for AP when
    they lack positives); accuracy thresholds sigmoid(score) per category.
    """
    n_categories = scored.scores.shape[1]
    per_category = []
    skipped = []
    aucs = []
    aps = []
    accs = []
    for c in range(n_categories):
        s = scored.scores[:, c]
        t = scored.truth[:, c]
        n_pos = int(t.sum())
        n_neg = len(t) - n_pos
        entry: dict = {"category": c, "positives": n_pos}
        pred = sigmoid(s) >= threshold
        acc = float((pred == (t == 1)).mean())
        entry["acc"] = acc
        accs.append(acc)
        if n_pos == 0 or n_neg == 0:
            skipped.append(c)
            entry["auc"] = None
            entry["ap"] = None
        else:
            entry["auc"] = roc_auc(s, t)
            entry["ap"] = average_precision(s, t)
            aucs.append(entry["auc"])
            aps.append(entry["ap"])
        per_category.append(entry)
    if not aucs:
        raise AllCategoriesDegenerate("no category has both positives and negatives")
    return MetricsReport(
        auc=float(np.mean(aucs)),
        map=float(np.mean(aps)),
        acc=float(np.mean(accs)),
        per_category=per_category,
        skipped_categories=skipped,
    )
