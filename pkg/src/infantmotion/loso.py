"""Leave-one-subject-out evaluation, optional label refinement and sensor ablation."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import cnn
from .core import CLASS_SETS, Subject, subject_frames, vote_prior_matrix
from .features import Sensor, channel_indices, fit_standardizer, frame_features, parse_sensors
from .iar import iar_refine
from .metrics import (
    ConfusionMatrix,
    activity_profile,
    cohen_kappa,
    confusion,
    fleiss_kappa,
    majority_truth,
    mann_whitney,
    ratings_table,
    summary_metrics,
)
from .svm import DegenerateTaskError, ecoc_proba, ecoc_train

log = logging.getLogger(__name__)

SUBSETS = ("full_agreement", "all_frames")
ABLATION_CONFIGS = ("left_arm", "right_arm", "left_leg", "right_leg", "arms", "legs", "arm_leg", "all")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; embedded verbatim in its report."""

    classifier: str = "svm"
    track: str = "both"
    iar: bool = False
    iterations: int = 5
    iar_classifier: str | None = None  # inner-fold trainer, defaults to ``classifier``
    sensors: str = "all"
    seed: int = 0
    jobs: int = 1
    svm_lambda: float = 1e-4
    svm_epochs: int = 20
    cnn_lr: float = 1e-3
    cnn_epochs: int = 30
    cnn_chunk_frames: int | None = None

    def __post_init__(self):
        if self.classifier not in ("svm", "cnn"):
            raise ValueError(f"classifier must be svm or cnn, got {self.classifier!r}")
        if self.iar_classifier not in (None, "svm", "cnn"):
            raise ValueError(f"iar_classifier must be svm or cnn, got {self.iar_classifier!r}")
        if self.track not in ("posture", "movement", "both"):
            raise ValueError(f"track must be posture, movement or both, got {self.track!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        parse_sensors(self.sensors)

    @property
    def tracks(self) -> tuple[str, ...]:
        return ("posture", "movement") if self.track == "both" else (self.track,)

    @property
    def inner_classifier(self) -> str:
        return self.iar_classifier or self.classifier

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Prepared:
    """Frame-level arrays of one subject, computed once per run."""

    subject_id: str
    windows: np.ndarray
    features: np.ndarray
    usable: np.ndarray
    priors: dict  # track -> (F, C), all-zero rows where no annotator labelled
    labeled: dict  # track -> (F,)
    votes: dict  # track -> (K, F)
    majority: dict  # track -> (F,), -1 without a strict majority
    tier: dict  # track -> (F,) winning vote count
    truth: dict  # track -> (F,) hidden generator truth when available
    rate: float = 52.0

    @property
    def n_frames(self) -> int:
        return len(self.usable)


def prepare(subject: Subject, sensors: Sequence[Sensor] | str = "all") -> Prepared:
    sensors = parse_sensors(sensors)
    sf = subject_frames(subject)
    rate = subject.recording.sample_rate
    feats = frame_features(sf.windows, rate, sensors)
    priors, labeled, majority, tier = {}, {}, {}, {}
    for track, cs in CLASS_SETS.items():
        v = sf.votes[track]
        priors[track], labeled[track] = vote_prior_matrix(v, cs.C)
        if len(v):
            majority[track], tier[track] = majority_truth(v)
        else:
            majority[track] = np.full(len(sf.usable), -1)
            tier[track] = np.zeros(len(sf.usable), dtype=np.int64)
    return Prepared(
        sf.subject_id, sf.windows, feats, sf.usable, priors, labeled, dict(sf.votes), majority, tier,
        dict(sf.truth), rate,
    )


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def hard_labels(soft: np.ndarray) -> np.ndarray:
    """Argmax with ties to the lowest class index; -1 for all-zero rows."""
    out = np.argmax(soft, axis=1)
    return np.where(soft.sum(axis=1) > 0, out, -1)


# --- trainers -----------------------------------------------------------------


def _train_rows(p: Prepared, labels: np.ndarray) -> np.ndarray:
    return p.usable & (labels.sum(axis=1) > 0)


def fit_svm(
    train: Sequence[Prepared], labels: Sequence[np.ndarray], track: str, cfg: RunConfig, seed: int
):
    """Standardizer and ECOC model fitted on hard labels of the training frames."""
    rows = [_train_rows(p, l) for p, l in zip(train, labels)]
    X = np.concatenate([p.features[r] for p, r in zip(train, rows)])
    y = np.concatenate([hard_labels(l[r]) for l, r in zip(labels, rows)])
    if len(X) == 0:
        raise ValueError("no usable labelled training frames")
    std = fit_standardizer(X)
    model = ecoc_train(std.apply(X), y, CLASS_SETS[track], cfg.svm_lambda, cfg.svm_epochs, seed)
    return std, model


def _svm_fingerprint(std, model) -> str:
    ws = [np.r_[m.w, m.b] for m in model.learners if m is not None]
    return _digest(std.mean, std.std, *ws)


def posture_condition(labels: np.ndarray) -> np.ndarray:
    return cnn.one_hot(hard_labels(labels), CLASS_SETS["posture"].C)


def fit_cnn(
    train: Sequence[Prepared],
    labels: Sequence[np.ndarray],
    track: str,
    cfg: RunConfig,
    seed: int,
    conditions: Sequence[np.ndarray] | None = None,
) -> tuple[cnn.Network, list[float]]:
    sensors = tuple(s.value for s in parse_sensors(cfg.sensors))
    mcfg = cnn.ModelConfig(
        n_classes=CLASS_SETS[track].C,
        sensors=sensors,
        condition_dim=CLASS_SETS["posture"].C if conditions is not None else 0,
    )
    items = []
    for k, (p, l) in enumerate(zip(train, labels)):
        mask = _train_rows(p, l)
        targets = np.where(mask[:, None], l, 0.0)
        cond = conditions[k] if conditions is not None else None
        items.append(cnn.TrainItem(p.windows, targets, mask, cond))
    net = cnn.build_model(mcfg, seed)
    tcfg = cnn.TrainConfig(lr=cfg.cnn_lr, epochs=cfg.cnn_epochs, seed=seed, chunk_frames=cfg.cnn_chunk_frames)
    return cnn.train(net, items, tcfg)


def _cnn_fingerprint(net: cnn.Network) -> str:
    return _digest(net.input_mean, net.input_std, *(net.params[k].data for k in sorted(net.params)))


def likelihood_fn(
    train: Sequence[Prepared], track: str, cfg: RunConfig, posture_labels: Sequence[np.ndarray] | None
):
    """IAR inner-fold trainer: fit on the other infants, return the target's likelihoods."""

    def fit_predict(train_ids, train_labels, target_id, seed):
        subset = [train[i] for i in train_ids]
        target = train[target_id]
        if cfg.inner_classifier == "svm":
            try:
                std, model = fit_svm(subset, train_labels, track, cfg, seed)
            except DegenerateTaskError:
                return np.ones((target.n_frames, CLASS_SETS[track].C))
            return ecoc_proba(model, std.apply(target.features))
        conds = None
        if track == "movement":
            conds = [posture_condition(posture_labels[i]) for i in train_ids]
        net, _ = fit_cnn(subset, train_labels, track, cfg, seed, conds)
        tc = posture_condition(posture_labels[target_id]) if track == "movement" else None
        return cnn.forward(net, target.windows, tc)

    return fit_predict


# --- one fold -----------------------------------------------------------------


@dataclass
class FoldOutcome:
    subject_id: str
    skipped: bool = False
    warning: str | None = None
    predictions: dict = field(default_factory=dict)  # track -> (F,) class indices
    probabilities: dict = field(default_factory=dict)  # track -> (F, C)
    fingerprints: dict = field(default_factory=dict)
    refined: dict = field(default_factory=dict)  # track -> list of training soft labels


def run_fold(prepared: Sequence[Prepared], test_index: int, cfg: RunConfig) -> FoldOutcome:
    """Train on every subject but ``test_index`` and predict the held-out one.

    Only the training subjects' arrays are ever passed to label refinement,
    standardisation and model fitting.
    """
    test = prepared[test_index]
    out = FoldOutcome(test.subject_id)
    if not test.usable.any():
        out.skipped = True
        out.warning = f"subject {test.subject_id} has no usable frames; fold skipped"
        return out
    train = [p for i, p in enumerate(prepared) if i != test_index]
    fold_seed = cfg.seed * 100_003 + test_index
    need = ("posture", "movement") if (cfg.classifier == "cnn" and "movement" in cfg.tracks) else cfg.tracks

    labels: dict[str, list[np.ndarray]] = {}
    for track in ("posture", "movement"):
        if track not in need:
            continue
        priors = [p.priors[track] for p in train]
        if cfg.iar:
            fp = likelihood_fn(train, track, cfg, labels.get("posture"))
            if track == "movement" and cfg.inner_classifier == "cnn" and "posture" not in labels:
                raise ValueError("movement refinement with the cnn needs posture labels")
            state = iar_refine(priors, fp, cfg.iterations, seed=fold_seed)
            labels[track] = state.labels
        else:
            labels[track] = priors
        out.refined[track] = labels[track]
        out.fingerprints[f"labels/{track}"] = _digest(*labels[track])

    if cfg.classifier == "svm":
        for track in cfg.tracks:
            std, model = fit_svm(train, labels[track], track, cfg, fold_seed)
            out.fingerprints[f"model/{track}"] = _svm_fingerprint(std, model)
            prob = ecoc_proba(model, std.apply(test.features))
            out.probabilities[track] = prob
            out.predictions[track] = np.argmax(prob, axis=1)
    else:
        post_net, _ = fit_cnn(train, labels["posture"], "posture", cfg, fold_seed)
        out.fingerprints["model/posture"] = _cnn_fingerprint(post_net)
        p_post = cnn.forward(post_net, test.windows)
        if "posture" in cfg.tracks:
            out.probabilities["posture"] = p_post
            out.predictions["posture"] = np.argmax(p_post, axis=1)
        if "movement" in cfg.tracks:
            conds = [posture_condition(l) for l in labels["posture"]]
            mov_net, _ = fit_cnn(train, labels["movement"], "movement", cfg, fold_seed + 1, conds)
            out.fingerprints["model/movement"] = _cnn_fingerprint(mov_net)
            cond = cnn.one_hot(np.argmax(p_post, axis=1), CLASS_SETS["posture"].C)
            p_mov = cnn.forward(mov_net, test.windows, cond)
            out.probabilities["movement"] = p_mov
            out.predictions["movement"] = np.argmax(p_mov, axis=1)
    return out


_WORKER_STATE: tuple | None = None


def _init_worker(prepared, cfg):
    global _WORKER_STATE
    _WORKER_STATE = (prepared, cfg)


def _run_fold_worker(i: int) -> FoldOutcome:
    prepared, cfg = _WORKER_STATE
    return run_fold(prepared, i, cfg)


def run_folds(prepared: Sequence[Prepared], cfg: RunConfig) -> list[FoldOutcome]:
    """All folds, in subject order; ``cfg.jobs`` > 1 runs them in worker processes."""
    n = len(prepared)
    if cfg.jobs == 1 or n == 1:
        return [run_fold(prepared, i, cfg) for i in range(n)]
    with ProcessPoolExecutor(
        max_workers=min(cfg.jobs, n), initializer=_init_worker, initargs=(list(prepared), cfg)
    ) as ex:
        return list(ex.map(_run_fold_worker, range(n)))


# --- evaluation ---------------------------------------------------------------


def subset_mask(p: Prepared, track: str, subset: str) -> np.ndarray:
    """Usable frames with a majority label; full agreement additionally needs every annotator."""
    K = p.votes[track].shape[0]
    if subset == "full_agreement":
        return p.usable & (p.tier[track] == K) & (K > 0)
    if subset == "all_frames":
        return p.usable & (p.majority[track] >= 0)
    raise ValueError(f"unknown subset {subset!r}")


def _clean(x):
    """JSON-ready copy: numpy scalars to Python, NaN to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return None if math.isnan(float(x)) else float(x)
    return x


def _kappa_block(prepared, folds, track) -> dict:
    C = CLASS_SETS[track].C
    tables, pairs = [], {}
    for p, f in zip(prepared, folds):
        v = p.votes[track][:, p.usable]
        if v.shape[0] >= 2:
            tables.append(ratings_table(v, C))
        if f.skipped:
            continue
        pred = f.predictions[track][p.usable]
        for k in range(v.shape[0]):
            ok = v[k] >= 0
            a, b = pairs.setdefault(k, ([], []))
            a.extend(v[k][ok].tolist())
            b.extend(pred[ok].tolist())
    table = np.concatenate(tables) if tables else np.zeros((0, C))
    fleiss = fleiss_kappa(table) if len(table) else None
    cohen = {f"annotator{k + 1}": cohen_kappa(a, b) for k, (a, b) in sorted(pairs.items()) if a}
    return {
        "fleiss_annotators": fleiss,
        "cohen_classifier": cohen,
        "cohen_classifier_mean": float(np.mean(list(cohen.values()))) if cohen else None,
    }


def evaluate(prepared: Sequence[Prepared], folds: Sequence[FoldOutcome], cfg: RunConfig) -> dict:
    """Assemble the report dictionary (deterministic given the fold outcomes)."""
    report: dict = {
        "config": cfg.to_dict(),
        "iar": {"enabled": cfg.iar, "iterations": cfg.iterations if cfg.iar else 0,
                "classifier": cfg.inner_classifier if cfg.iar else None},
        "subjects": [p.subject_id for p in prepared],
        "warnings": [f.warning for f in folds if f.warning],
        "folds": [
            {"subject": f.subject_id, "skipped": f.skipped, "fingerprints": dict(sorted(f.fingerprints.items()))}
            for f in folds
        ],
        "tracks": {},
    }
    for track in cfg.tracks:
        cs = CLASS_SETS[track]
        block: dict = {"classes": list(cs.classes), "subsets": {}, "folds": [], "profiles": {}}
        pooled = {s: ConfusionMatrix(np.zeros((cs.C, cs.C), dtype=np.int64), cs) for s in SUBSETS}
        for p, f in zip(prepared, folds):
            entry = {"subject": p.subject_id, "skipped": f.skipped}
            if not f.skipped:
                for s in SUBSETS:
                    m = subset_mask(p, track, s)
                    cm = confusion(f.predictions[track][m], p.majority[track][m], cs)
                    pooled[s] = pooled[s] + cm
                    entry[s] = {"frames": cm.total, **summary_metrics(cm).as_dict()}
                human = p.majority[track][p.usable]
                machine = f.predictions[track][p.usable]
                if (human >= 0).any():
                    block["profiles"][p.subject_id] = {
                        "human": activity_profile(human, cs.C),
                        "machine": activity_profile(machine, cs.C),
                    }
            block["folds"].append(entry)
        for s in SUBSETS:
            block["subsets"][s] = {
                "frames": pooled[s].total,
                "confusion": pooled[s].counts,
                **summary_metrics(pooled[s]).as_dict(),
            }
        block["kappa"] = _kappa_block(prepared, folds, track)
        truth_pairs = [
            (f.predictions[track][p.usable & (p.truth[track] >= 0)], p.truth[track][p.usable & (p.truth[track] >= 0)])
            for p, f in zip(prepared, folds)
            if not f.skipped and track in p.truth
        ]
        if truth_pairs:
            cm = confusion(np.concatenate([a for a, _ in truth_pairs]), np.concatenate([b for _, b in truth_pairs]), cs)
            block["hidden_truth"] = {"frames": cm.total, **summary_metrics(cm).as_dict()}
        report["tracks"][track] = block
    return _clean(report)


def loso_run(subjects: Sequence[Subject], cfg: RunConfig, prepared: Sequence[Prepared] | None = None) -> dict:
    if len(subjects) < 3:
        raise ValueError("leave-one-subject-out needs at least three subjects")
    prepared = list(prepared) if prepared is not None else [prepare(s, cfg.sensors) for s in subjects]
    folds = run_folds(prepared, cfg)
    for f in folds:
        if f.warning:
            log.warning(f.warning)
    return evaluate(prepared, folds, cfg)


def fold_uars(report: dict, track: str, subset: str = "all_frames") -> list[float]:
    return [
        f[subset]["uar"]
        for f in report["tracks"][track]["folds"]
        if not f["skipped"] and f[subset]["uar"] is not None
    ]


def compare_reports(a: dict, b: dict, track: str, subset: str = "all_frames") -> dict:
    """Pooled UAR difference (a minus b) and a Mann-Whitney test on per-fold UARs."""
    ua, ub = fold_uars(a, track, subset), fold_uars(b, track, subset)
    mw = mann_whitney(ua, ub)
    return {
        "uar_a": a["tracks"][track]["subsets"][subset]["uar"],
        "uar_b": b["tracks"][track]["subsets"][subset]["uar"],
        "uar_diff": a["tracks"][track]["subsets"][subset]["uar"] - b["tracks"][track]["subsets"][subset]["uar"],
        "mann_whitney": {"U": mw.U, "p": mw.p, "method": mw.method},
    }


def ablate(subjects: Sequence[Subject], configs: Sequence[str], cfg: RunConfig) -> dict:
    """Pooled LOSO UAR for each sensor configuration; ``all`` is tagged as the baseline."""
    if not configs:
        raise ValueError("no sensor configurations given")
    rows = {}
    for name in configs:
        sensors = parse_sensors(name)
        if not sensors:
            raise ValueError(f"empty sensor configuration {name!r}")
        run_cfg = replace(cfg, sensors=name)
        rep = loso_run(subjects, run_cfg)
        rows[name] = {
            "sensors": [s.name for s in sensors],
            "feature_dim": int(len(channel_indices(sensors)) * 14),
            "baseline": len(sensors) == 4,
            **{
                track: {s: rep["tracks"][track]["subsets"][s]["uar"] for s in SUBSETS}
                for track in cfg.tracks
            },
        }
    return _clean({"config": cfg.to_dict(), "configs": list(configs), "rows": rows})
