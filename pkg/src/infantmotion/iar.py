"""Iterative annotation refinement of soft training labels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

UNDERFLOW = 1e-300

# fit_predict(train_ids, train_labels, target_id, seed) -> (F_target, C) likelihoods
FitPredict = Callable[[Sequence[int], Sequence[np.ndarray], int, int], np.ndarray]


def combine_posterior(prior: np.ndarray, likelihood: np.ndarray) -> np.ndarray:
    """Multiply prior and likelihood per frame and renormalise.

    Works on single vectors or (frames, C) arrays. Rows whose product mass
    falls below 1e-300 (and all-zero prior rows) keep the prior unchanged.
    """
    prior = np.asarray(prior, dtype=np.float64)
    likelihood = np.asarray(likelihood, dtype=np.float64)
    if prior.shape != likelihood.shape:
        raise ValueError(f"length mismatch: prior {prior.shape}, likelihood {likelihood.shape}")
    prod = prior * likelihood
    mass = prod.sum(axis=-1, keepdims=True)
    ok = mass >= UNDERFLOW
    return np.where(ok, prod / np.where(ok, mass, 1.0), prior)


@dataclass
class IarState:
    iteration: int
    labels: list[np.ndarray]
    originals: tuple[np.ndarray, ...] = field(repr=False)


def iar_refine(
    priors: Sequence[np.ndarray],
    fit_predict: FitPredict,
    iterations: int = 5,
    seed: int = 0,
    allow_zero: bool = False,
    map_fn: Callable = map,
    on_iteration: Callable[[IarState], None] | None = None,
) -> IarState:
    """Refine the soft labels of a training set of infants.

    Each iteration trains, for every infant j, a classifier on the other
    infants' current labels, predicts j's frames and multiplies the
    prediction into j's *original* priors. ``priors`` rows that are all-zero
    mark unlabelled frames and stay zero.
    """
    originals = tuple(np.array(p, dtype=np.float64, copy=True) for p in priors)
    for p in originals:
        p.setflags(write=False)
    n = len(originals)
    if n < 2:
        raise ValueError("inner fold impossible: IAR needs at least two training infants")
    if iterations < 0 or (iterations == 0 and not allow_zero):
        raise ValueError("iterations must be >= 1 (pass allow_zero=True for an identity run)")
    state = IarState(0, [p.copy() for p in originals], originals)
    if on_iteration is not None:
        on_iteration(state)
    for it in range(1, iterations + 1):
        current = state.labels

        def refine_one(j: int, it=it, current=current) -> np.ndarray:
            others = [i for i in range(n) if i != j]
            likelihood = fit_predict(others, [current[i] for i in others], j, seed + 1000 * it + j)
            return combine_posterior(originals[j], likelihood)

        labels = list(map_fn(refine_one, range(n)))
        state = IarState(it, labels, originals)
        if on_iteration is not None:
            on_iteration(state)
    return state


def export_refined(
    labels: Iterable[tuple[str, np.ndarray]], stream: TextIO, frame_ids: Sequence[np.ndarray] | None = None
) -> None:
    """Write ``{infant, frame, class_probs}`` line records."""
    for k, (infant, probs) in enumerate(labels):
        ids = frame_ids[k] if frame_ids is not None else np.arange(len(probs))
        for f, row in zip(ids, probs):
            stream.write(
                json.dumps({"infant": infant, "frame": int(f), "class_probs": [float(v) for v in row]})
                + "\n"
            )


def read_refined(stream: TextIO) -> dict[str, np.ndarray]:
    rows: dict[str, list[tuple[int, list[float]]]] = {}
    for line in stream:
        if line.strip():
            rec = json.loads(line)
            rows.setdefault(rec["infant"], []).append((rec["frame"], rec["class_probs"]))
    return {k: np.array([p for _, p in sorted(v)]) for k, v in rows.items()}
