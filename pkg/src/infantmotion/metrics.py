"""Classification metrics, agreement statistics and the Mann-Whitney U test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .core import ClassSet


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, columns = prediction
    classes: ClassSet

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise ValueError("cannot add confusion matrices over different class sets")
        return ConfusionMatrix(self.counts + other.counts, self.classes)


def confusion(pred: Sequence[int], truth: Sequence[int], classes: ClassSet) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(truth)} labels")
    counts = np.zeros((classes.C, classes.C), dtype=np.int64)
    if (pred < 0).any() or (truth < 0).any() or (pred >= classes.C).any() or (truth >= classes.C).any():
        raise ValueError("labels outside the class set")
    np.add.at(counts, (truth, pred), 1)
    return ConfusionMatrix(counts, classes)


@dataclass(frozen=True)
class Metrics:
    acc: float
    uar: float
    uap: float
    uaf: float
    precision: tuple[float, ...]
    recall: tuple[float | None, ...]
    f: tuple[float | None, ...]
    support: tuple[int, ...]

    def as_dict(self) -> dict:
        return {
            "acc": self.acc,
            "uar": self.uar,
            "uap": self.uap,
            "uaf": self.uaf,
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f": list(self.f),
            "support": list(self.support),
        }


def summary_metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy plus unweighted average recall, precision and F-score.

    Classes without truth frames have undefined recall and are left out of all
    three unweighted means. A class that is never predicted has precision 0.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    precision = np.where(predicted > 0, tp / np.where(predicted > 0, predicted, 1), 0.0)
    present = support > 0
    recall = np.where(present, tp / np.where(present, support, 1), np.nan)
    denom = precision + recall
    f = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    f = np.where(present, f, np.nan)
    acc = float(tp.sum() / total) if total > 0 else math.nan
    if present.any():
        uar = float(np.mean(recall[present]))
        uap = float(np.mean(precision[present]))
        uaf = float(np.mean(f[present]))
    else:
        uar = uap = uaf = math.nan
    return Metrics(
        acc,
        uar,
        uap,
        uaf,
        tuple(float(v) for v in precision),
        tuple(float(v) if p else None for v, p in zip(recall, present)),
        tuple(float(v) if p else None for v, p in zip(f, present)),
        tuple(int(v) for v in support),
    )


def cohen_kappa(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    """Cohen's kappa with marginal-product chance agreement (1.0 when chance is 1)."""
    if len(a) != len(b) or len(a) == 0:
        raise ValueError("need two equal-length, nonempty label sequences")
    n = len(a)
    cats = sorted(set(a) | set(b), key=repr)
    idx = {c: i for i, c in enumerate(cats)}
    ia = np.array([idx[x] for x in a])
    ib = np.array([idx[x] for x in b])
    po = float(np.mean(ia == ib))
    pa = np.bincount(ia, minlength=len(cats)) / n
    pb = np.bincount(ib, minlength=len(cats)) / n
    pe = float(pa @ pb)
    if pe >= 1.0:
        return 1.0
    return (po - pe) / (1.0 - pe)


def scott_pi(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    """Scott's pi: two-rater agreement with chance from the pooled label distribution."""
    if len(a) != len(b) or len(a) == 0:
        raise ValueError("need two equal-length, nonempty label sequences")
    cats = sorted(set(a) | set(b), key=repr)
    idx = {c: i for i, c in enumerate(cats)}
    ia = np.array([idx[x] for x in a])
    ib = np.array([idx[x] for x in b])
    po = float(np.mean(ia == ib))
    pooled = (np.bincount(ia, minlength=len(cats)) + np.bincount(ib, minlength=len(cats))) / (
        2 * len(a)
    )
    pe = float(pooled @ pooled)
    if pe >= 1.0:
        return 1.0
    return (po - pe) / (1.0 - pe)


def fleiss_kappa(ratings: np.ndarray, K: int | None = None) -> float:
    """Fleiss' kappa from an items x categories table of rating counts."""
    table = np.asarray(ratings, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] == 0:
        raise ValueError("ratings must be a nonempty items x categories table")
    rows = table.sum(axis=1)
    if K is None:
        K = int(rows[0])
    if K < 2:
        raise ValueError("Fleiss' kappa needs at least two raters")
    if not np.all(rows == K):
        raise ValueError(f"every item must have exactly {K} ratings")
    p_item = (np.sum(table**2, axis=1) - K) / (K * (K - 1))
    p_bar = float(p_item.mean())
    p_cat = table.sum(axis=0) / table.sum()
    p_e = float(np.sum(p_cat**2))
    if p_e >= 1.0:
        return 1.0
    return (p_bar - p_e) / (1.0 - p_e)


def ratings_table(label_idx: np.ndarray, C: int) -> np.ndarray:
    """Items x categories counts from (K raters, F items) indices; items with a missing rating are dropped."""
    label_idx = np.asarray(label_idx)
    complete = np.all(label_idx >= 0, axis=0)
    sub = label_idx[:, complete]
    table = np.zeros((sub.shape[1], C), dtype=np.int64)
    for row in sub:
        np.add.at(table, (np.arange(sub.shape[1]), row), 1)
    return table


def majority_truth(votes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Majority label and agreement tier per frame from (K, F) vote indices.

    The tier is the winning vote count (K = full agreement); frames without a
    strict majority get label −1 and tier 0.
    """
    votes = np.atleast_2d(np.asarray(votes, dtype=np.int64))
    K, F = votes.shape
    labels = np.full(F, -1, dtype=np.int64)
    tier = np.zeros(F, dtype=np.int64)
    if F == 0 or K == 0:
        return labels, tier
    C = int(votes.max()) + 1 if (votes >= 0).any() else 1
    counts = np.zeros((F, C), dtype=np.int64)
    for row in votes:
        ok = row >= 0
        np.add.at(counts, (np.flatnonzero(ok), row[ok]), 1)
    best = counts.argmax(axis=1)
    top = counts.max(axis=1)
    has = 2 * top > K
    labels[has] = best[has]
    tier[has] = top[has]
    return labels, tier


def activity_profile(labels: Sequence[int], C: int) -> np.ndarray:
    """Relative frequency of each class among the labelled frames."""
    labels = np.asarray(labels, dtype=np.int64)
    labels = labels[labels >= 0]
    if len(labels) == 0:
        raise ValueError("activity profile needs at least one labelled frame")
    return np.bincount(labels, minlength=C) / len(labels)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _rank_sum_distribution(doubled_ranks: np.ndarray, k: int) -> np.ndarray:
    """Counts of k-subsets of ``doubled_ranks`` by their sum (index = sum)."""
    total = int(doubled_ranks.sum())
    dist = np.zeros((k + 1, total + 1))
    dist[0, 0] = 1.0
    for r in doubled_ranks.astype(np.int64):
        for j in range(k, 0, -1):
            dist[j, r:] += dist[j - 1, : total + 1 - r]
    return dist[k]


@dataclass(frozen=True)
class MannWhitneyResult:
    U: float
    p: float
    method: str


EXACT_MAX = 8


def mann_whitney(x: Sequence[float], y: Sequence[float]) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test; U is reported for ``x``.

    Exact (permutation distribution of the midrank sum, ties included) when
    the smaller sample has at most 8 values, otherwise the normal
    approximation with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be nonempty")
    ranks = _midranks(np.concatenate([x, y]))
    U = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    if min(n1, n2) <= EXACT_MAX:
        small_first = n1 <= n2
        k = n1 if small_first else n2
        doubled = np.rint(2 * ranks).astype(np.int64)
        part = doubled[:n1] if small_first else doubled[n1:]
        dist = _rank_sum_distribution(doubled, k)
        dist /= dist.sum()
        obs = int(part.sum())
        lower = float(dist[: obs + 1].sum())
        upper = float(dist[obs:].sum())
        return MannWhitneyResult(U, min(1.0, 2.0 * min(lower, upper)), "exact")
    n = n1 + n2
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return MannWhitneyResult(U, 1.0, "normal")
    z = max(0.0, abs(U - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    return MannWhitneyResult(U, min(1.0, math.erfc(z / math.sqrt(2.0))), "normal")
