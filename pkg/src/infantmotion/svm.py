"""Linear max-margin learners combined with one-vs-one output codes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .core import ClassSet, class_set

FORMAT_VERSION = 1


class DegenerateTaskError(ValueError):
    pass


@dataclass(frozen=True)
class LinearModel:
    w: np.ndarray
    b: float
    lam: float
    epochs: int
    seed: int
    objective_trace: tuple[float, ...] = field(default=(), compare=False)

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b


def hinge_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, lam: float) -> float:
    """lam/2 * (|w|^2 + b^2) + mean hinge loss (bias is regularised with w)."""
    margins = y * (X @ w + b)
    return 0.5 * lam * (w @ w + b * b) + float(np.mean(np.maximum(0.0, 1.0 - margins)))


def train_linear_svm(
    X: np.ndarray, y: np.ndarray, lam: float = 1e-4, epochs: int = 20, seed: int = 0
) -> LinearModel:
    """Epoch-shuffled subgradient descent on the regularised hinge objective.

    Step ``1/(lam*(t + t0))`` with ``t0 = 1/lam`` (initial step 1), iterates
    projected onto the ball of radius ``1/sqrt(lam)`` and averaged with weights
    proportional to ``t``. At each epoch end the averaged iterate replaces the
    current model only if it lowers the objective, so ``objective_trace`` is
    non-increasing. The bias is an extra weight on a constant feature.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be n x d with one label per row")
    if len(X) < 2 or not (np.any(y > 0) and np.any(y < 0)):
        raise DegenerateTaskError("degenerate binary task: both labels are required")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n, d = X.shape
    # canonical row order so the result does not depend on input ordering
    canon = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[canon], y[canon]
    Xa = np.hstack([X, np.ones((n, 1))])
    w = np.zeros(d + 1)
    avg = np.zeros(d + 1)
    weight_sum = 0.0
    t0 = 1.0 / lam
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng(seed)
    best = np.zeros(d + 1)
    best_obj = np.inf
    trace = []
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * (t + t0))
            xi, yi = Xa[i], y[i]
            margin = yi * (w @ xi)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += (eta * yi) * xi
            norm = np.sqrt(w @ w)
            if norm > radius:
                w *= radius / norm
            weight_sum += t
            avg += (w - avg) * (t / weight_sum)
        obj = hinge_objective(avg[:-1], avg[-1], X, y, lam)
        if obj <= best_obj:
            best, best_obj = avg.copy(), obj
        trace.append(best_obj)
    return LinearModel(best[:-1].copy(), float(best[-1]), lam, epochs, seed, tuple(trace))


def ecoc_code(C: int) -> np.ndarray:
    """One-vs-one code matrix of shape (C, C(C-1)/2)."""
    if C < 2:
        raise ValueError("ECOC needs at least two classes")
    pairs = [(i, j) for i in range(C) for j in range(i + 1, C)]
    code = np.zeros((C, len(pairs)), dtype=np.int64)
    for col, (i, j) in enumerate(pairs):
        code[i, col] = 1
        code[j, col] = -1
    return code


@dataclass(frozen=True)
class EcocModel:
    code: np.ndarray
    learners: tuple[LinearModel | None, ...]
    classes: ClassSet

    @property
    def dim(self) -> int:
        for m in self.learners:
            if m is not None:
                return m.w.shape[0]
        raise ValueError("model has no trained learners")

    def margins(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"feature dimension mismatch: model {self.dim}, input {X.shape[1]}")
        out = np.zeros((len(X), len(self.learners)))
        for l, m in enumerate(self.learners):
            if m is not None:
                out[:, l] = m.decision(X)
        return out

    def losses(self, X: np.ndarray) -> np.ndarray:
        """Per-class decoding loss: summed hinge of code entries times margins."""
        m = self.margins(X)
        return np.maximum(0.0, 1.0 - m[:, None, :] * self.code[None, :, :]).sum(axis=2)


def ecoc_train(
    X: np.ndarray,
    labels: np.ndarray,
    classes: ClassSet,
    lam: float = 1e-4,
    epochs: int = 20,
    seed: int = 0,
) -> EcocModel:
    """Train one learner per class pair.

    Pairs involving a class absent from ``labels`` get no learner (margin 0),
    which leaves decoding for the present classes unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if len(present) < 2:
        raise DegenerateTaskError("degenerate binary task: training data has a single class")
    code = ecoc_code(classes.C)
    learners: list[LinearModel | None] = []
    for col in range(code.shape[1]):
        pos = int(np.flatnonzero(code[:, col] == 1)[0])
        neg = int(np.flatnonzero(code[:, col] == -1)[0])
        sel = (labels == pos) | (labels == neg)
        if not (np.any(labels == pos) and np.any(labels == neg)):
            learners.append(None)
            continue
        y = np.where(labels[sel] == pos, 1.0, -1.0)
        learners.append(train_linear_svm(X[sel], y, lam, epochs, seed * 1000 + col))
    return EcocModel(code, tuple(learners), classes)


def ecoc_predict(model: EcocModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class indices and per-class loss scores (lower is better).

    ``argmin`` resolves ties to the lowest class index.
    """
    losses = model.losses(x)
    return np.argmin(losses, axis=1), losses


def ecoc_proba(model: EcocModel, x: np.ndarray) -> np.ndarray:
    """Positive class likelihoods as a softmax over negated decoding losses."""
    z = -model.losses(x)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def dump_model(model: EcocModel, stream: TextIO) -> None:
    """Text dump; floats are stored via ``float.hex`` so loading is exact."""
    doc = {
        "format": "ecoc-linear-svm",
        "version": FORMAT_VERSION,
        "track": model.classes.track,
        "code": model.code.tolist(),
        "learners": [
            None
            if m is None
            else {
                "w": [float(v).hex() for v in m.w],
                "b": float(m.b).hex(),
                "lambda": m.lam,
                "epochs": m.epochs,
                "seed": m.seed,
            }
            for m in model.learners
        ],
    }
    json.dump(doc, stream)


def load_model(stream: TextIO) -> EcocModel:
    doc = json.load(stream)
    if doc.get("format") != "ecoc-linear-svm" or doc.get("version") != FORMAT_VERSION:
        raise ValueError("not a supported ECOC model dump")
    learners = tuple(
        None
        if m is None
        else LinearModel(
            np.array([float.fromhex(v) for v in m["w"]]),
            float.fromhex(m["b"]),
            m["lambda"],
            m["epochs"],
            m["seed"],
        )
        for m in doc["learners"]
    )
    return EcocModel(np.array(doc["code"], dtype=np.int64), learners, class_set(doc["track"]))
