"""Seeded synthetic recordings and simulated annotators.

Postures set the gravity direction seen by each limb's accelerometer; no
single limb separates all five postures, all four together do. Movements add
band-limited gyroscope oscillations on specific limbs, and each left/right
pair differs only in which side carries the oscillation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    META_TAGS,
    MOVEMENT,
    N_CHANNELS,
    POSTURE,
    WINDOW_LEN,
    AnnotationSet,
    Interval,
    Recording,
    Subject,
    write_subject,
)

G = 9.81
AXES = {"X": 0, "Y": 1, "Z": 2}
SENSORS = ("LeftArm", "RightArm", "LeftLeg", "RightLeg")

# unit gravity direction per posture, per sensor ("+z", "-x", ...)
DEFAULT_GRAVITY = {
    "prone": ("+z", "+z", "+z", "+z"),
    "supine": ("-z", "-z", "-z", "-z"),
    "side L": ("+x", "-z", "+x", "-z"),
    "side R": ("-z", "-x", "-z", "-x"),
    "crawl posture": ("+y", "+y", "+z", "+z"),
}

# (sensor, gyro axis, frequency Hz, amplitude deg/s, phase rad)
DEFAULT_RECIPES = {
    "macro still": [],
    "turn L": [("LeftArm", "X", 0.7, 80.0, 0.0), ("LeftLeg", "X", 0.7, 80.0, 0.0)],
    "turn R": [("RightArm", "X", 0.7, 80.0, 0.0), ("RightLeg", "X", 0.7, 80.0, 0.0)],
    "pivot L": [("LeftArm", "Z", 1.5, 60.0, 0.0), ("LeftLeg", "Z", 1.5, 60.0, math.pi)],
    "pivot R": [("RightArm", "Z", 1.5, 60.0, 0.0), ("RightLeg", "Z", 1.5, 60.0, math.pi)],
    "crawl proto": [("LeftLeg", "Y", 1.0, 70.0, 0.0), ("RightLeg", "Y", 1.0, 70.0, 0.0)],
    "crawl commando": [
        ("LeftArm", "Y", 1.2, 90.0, 0.0),
        ("RightArm", "Y", 1.2, 90.0, math.pi),
        ("LeftLeg", "Y", 1.2, 30.0, 0.0),
        ("RightLeg", "Y", 1.2, 30.0, math.pi),
    ],
}

DEFAULT_PAIRS = (
    [(p, m) for p in ("supine", "side L", "side R") for m in ("macro still", "turn L", "turn R")]
    + [("prone", m) for m in MOVEMENT.classes]
    + [("crawl posture", m) for m in ("macro still", "crawl proto", "crawl commando")]
)


@dataclass(frozen=True)
class AnnotatorNoise:
    jitter_s: float = 0.5
    confusion_rate: float = 0.1
    posture_confusion: tuple[tuple[float, ...], ...] | None = None
    movement_confusion: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.jitter_s < 0 or not 0 <= self.confusion_rate <= 1:
            raise ValueError("jitter must be >= 0 and confusion_rate in [0, 1]")
        for name, C in (("posture_confusion", POSTURE.C), ("movement_confusion", MOVEMENT.C)):
            m = getattr(self, name)
            if m is None:
                continue
            arr = np.asarray(m, dtype=np.float64)
            if arr.shape != (C, C) or (arr < 0).any() or not np.allclose(arr.sum(axis=1), 1.0):
                raise ValueError(f"{name} must be a {C}x{C} row-stochastic matrix")

    def confusion(self, track: str) -> np.ndarray:
        explicit = self.posture_confusion if track == "posture" else self.movement_confusion
        C = POSTURE.C if track == "posture" else MOVEMENT.C
        if explicit is not None:
            return np.asarray(explicit, dtype=np.float64)
        r = self.confusion_rate
        return np.full((C, C), r / (C - 1)) + np.eye(C) * (1.0 - r - r / (C - 1))


@dataclass(frozen=True)
class Scenario:
    duration_s: float = 600.0
    sample_rate: float = 52.0
    dwell_min_s: float = 4.0
    dwell_max_s: float = 15.0
    pairs: tuple[tuple[str, str], ...] = tuple(DEFAULT_PAIRS)
    pair_weights: tuple[float, ...] | None = None
    accel_noise: float = 0.3
    gyro_noise: float = 4.0
    amp_jitter: float = 0.2
    freq_jitter: float = 0.15
    orientation_jitter: float = 0.15
    meta_events: int = 1
    meta_min_s: float = 5.0
    meta_max_s: float = 15.0
    annotator_noise: AnnotatorNoise = field(default_factory=AnnotatorNoise)
    gravity: dict | None = None  # posture -> 4 axis codes, overrides DEFAULT_GRAVITY entries
    recipes: dict | None = None  # movement -> [(sensor, axis, Hz, deg/s, phase)], overrides DEFAULT_RECIPES

    def __post_init__(self):
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ValueError("duration and sample rate must be positive")
        if self.dwell_min_s * self.sample_rate < WINDOW_LEN:
            raise ValueError("dwell_min_s must cover at least one window")
        if self.dwell_max_s < self.dwell_min_s:
            raise ValueError("dwell_max_s < dwell_min_s")
        for p, m in self.pairs:
            if p not in POSTURE.classes or m not in MOVEMENT.classes:
                raise ValueError(f"unknown pair {(p, m)}")
        if len(self.pairs) < 2:
            raise ValueError("need at least two legal pairs")
        if self.pair_weights is not None and (
            len(self.pair_weights) != len(self.pairs) or min(self.pair_weights) <= 0
        ):
            raise ValueError("pair_weights must be positive, one per pair")
        if self.meta_events < 0 or self.meta_max_s < self.meta_min_s:
            raise ValueError("bad meta event settings")
        for posture, codes in (self.gravity or {}).items():
            if posture not in POSTURE.classes or len(codes) != 4:
                raise ValueError(f"gravity entry for {posture!r} needs a known posture and four axis codes")
            for code in codes:
                if len(code) != 2 or code[0] not in "+-" or code[1].upper() not in AXES:
                    raise ValueError(f"bad axis code {code!r}")
        for movement, recipe in (self.recipes or {}).items():
            if movement not in MOVEMENT.classes:
                raise ValueError(f"unknown movement {movement!r} in recipes")
            for sensor, axis, freq, amp, _ in recipe:
                if sensor not in SENSORS or axis not in AXES or freq <= 0 or amp < 0:
                    raise ValueError(f"bad recipe entry for {movement!r}")

    def gravity_table(self) -> dict:
        return {**DEFAULT_GRAVITY, **(self.gravity or {})}

    def recipe_table(self) -> dict:
        return {**DEFAULT_RECIPES, **(self.recipes or {})}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pairs"] = [list(p) for p in self.pairs]
        return d


def load_scenario(path: str | Path) -> Scenario:
    """Read a scenario JSON document; unknown keys and bad values raise ValueError."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"scenario is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValueError("scenario must be a JSON object")
    known = set(Scenario.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    doc = dict(doc)
    if "pairs" in doc:
        doc["pairs"] = tuple(tuple(p) for p in doc["pairs"])
    if "pair_weights" in doc and doc["pair_weights"] is not None:
        doc["pair_weights"] = tuple(doc["pair_weights"])
    if "annotator_noise" in doc:
        noise = dict(doc["annotator_noise"])
        bad = set(noise) - set(AnnotatorNoise.__dataclass_fields__)
        if bad:
            raise ValueError(f"unknown annotator_noise keys: {sorted(bad)}")
        for k in ("posture_confusion", "movement_confusion"):
            if noise.get(k) is not None:
                noise[k] = tuple(tuple(r) for r in noise[k])
        doc["annotator_noise"] = AnnotatorNoise(**noise)
    try:
        return Scenario(**doc)
    except TypeError as exc:
        raise ValueError(str(exc)) from None


def _unit(code: str) -> np.ndarray:
    v = np.zeros(3)
    v[AXES[code[1].upper()]] = 1.0 if code[0] == "+" else -1.0
    return v


@dataclass(frozen=True)
class SyntheticInfant:
    recording: Recording
    posture: AnnotationSet
    movement: AnnotationSet
    meta: AnnotationSet
    segment_samples: tuple[tuple[int, int, str, str], ...]


def _segments(sc: Scenario, rng: np.random.Generator, T: int) -> list[tuple[int, int, int]]:
    """Markov walk over legal pairs: (start sample, end sample, pair index)."""
    n_pairs = len(sc.pairs)
    weights = np.ones(n_pairs) if sc.pair_weights is None else np.asarray(sc.pair_weights, float)
    lo = int(round(sc.dwell_min_s * sc.sample_rate))
    hi = int(round(sc.dwell_max_s * sc.sample_rate))
    segs = []
    cur = int(rng.choice(n_pairs, p=weights / weights.sum()))
    start = 0
    while start < T:
        end = min(T, start + int(rng.integers(lo, hi + 1)))
        if T - end < lo:
            end = T
        segs.append((start, end, cur))
        w = weights.copy()
        w[cur] = 0.0
        cur = int(rng.choice(n_pairs, p=w / w.sum()))
        start = end
    return segs


def generate_infant(scenario: Scenario, seed: int, subject_id: str = "synthetic") -> SyntheticInfant:
    """Deterministic recording plus truth posture, movement and meta tracks."""
    sc = scenario
    rng = np.random.default_rng(seed)
    rate = sc.sample_rate
    T = int(round(sc.duration_s * rate))
    t = np.arange(T) / rate
    sensor_idx = {s: i for i, s in enumerate(SENSORS)}

    gravity = {}
    recipes = sc.recipe_table()
    for p, codes in sc.gravity_table().items():
        vecs = []
        for code in codes:
            v = _unit(code) + rng.normal(0.0, sc.orientation_jitter, 3)
            vecs.append(v / np.linalg.norm(v))
        gravity[p] = np.array(vecs)
    amp_scale = 1.0 + rng.uniform(-sc.amp_jitter, sc.amp_jitter)
    freq_scale = 1.0 + rng.uniform(-sc.freq_jitter, sc.freq_jitter)

    segs = _segments(sc, rng, T)
    x = np.zeros((T, N_CHANNELS))
    for start, end, k in segs:
        posture, movement = sc.pairs[k]
        tt = t[start:end]
        for s in range(4):
            x[start:end, s * 6 : s * 6 + 3] = G * gravity[posture][s]
        env = 1.0 + 0.3 * np.sin(2 * np.pi * 0.1 * tt + rng.uniform(0, 2 * np.pi))
        phase0 = rng.uniform(0, 2 * np.pi)
        for sensor, axis, freq, amp, phase in recipes[movement]:
            s = sensor_idx[sensor]
            wave = np.sin(2 * np.pi * freq * freq_scale * tt + phase0 + phase)
            x[start:end, s * 6 + 3 + AXES[axis]] += amp * amp_scale * env * wave
            # small linear acceleration from the same limb motion
            x[start:end, s * 6 + AXES[axis]] += 0.05 * G * env * wave
    noise = rng.normal(size=(T, N_CHANNELS))
    scale = np.tile(np.r_[np.full(3, sc.accel_noise), np.full(3, sc.gyro_noise)], 4)
    x += noise * scale

    meta = []
    for _ in range(sc.meta_events):
        length = int(rng.integers(int(sc.meta_min_s * rate), int(sc.meta_max_s * rate) + 1))
        if length >= T:
            continue
        start = int(rng.integers(0, T - length))
        tag = META_TAGS[int(rng.integers(len(META_TAGS)))]
        if any(start < e and s < start + length for s, e, _ in meta):
            continue
        meta.append((start, start + length, tag))
        if tag == "carried":
            x[start : start + length] += rng.normal(size=(length, N_CHANNELS)) * np.tile(
                np.r_[np.full(3, 3.0), np.full(3, 60.0)], 4
            )
        elif tag == "sensor-drop":
            s = int(rng.integers(4))
            x[start : start + length, s * 6 : s * 6 + 6] = np.nan
    valid = ~np.isnan(x).any(axis=1)
    rec = Recording(subject_id, rate, x, valid)

    def track(name: str, pos: int) -> AnnotationSet:
        ivs = []
        for start, end, k in segs:
            label = sc.pairs[k][pos]
            if ivs and ivs[-1].label == label:
                ivs[-1] = Interval(ivs[-1].start_s, end / rate, label)
            else:
                ivs.append(Interval(start / rate, end / rate, label))
        return AnnotationSet("truth", name, tuple(ivs))

    meta_set = AnnotationSet(
        "truth", "meta", tuple(Interval(s / rate, e / rate, tag) for s, e, tag in sorted(meta))
    )
    seg_info = tuple((s, e) + tuple(sc.pairs[k]) for s, e, k in segs)
    return SyntheticInfant(rec, track("posture", 0), track("movement", 1), meta_set, seg_info)


def _jitter_track(track: AnnotationSet, noise: AnnotatorNoise, rng: np.random.Generator, name: str) -> AnnotationSet:
    ivs = list(track.intervals)
    if not ivs:
        return AnnotationSet(name, track.track, ())
    bounds = [iv.start_s for iv in ivs] + [ivs[-1].end_s]
    if noise.jitter_s > 0:
        gap = 0.05
        for i in range(1, len(bounds) - 1):
            moved = bounds[i] + rng.normal(0.0, noise.jitter_s)
            contiguous = ivs[i - 1].end_s == ivs[i].start_s
            lo = bounds[i - 1] + gap
            hi = ivs[i].end_s - gap
            if contiguous and lo < hi:
                bounds[i] = min(max(moved, lo), hi)
    conf = noise.confusion(track.track)
    classes = POSTURE.classes if track.track == "posture" else MOVEMENT.classes
    out = []
    for i, iv in enumerate(ivs):
        label = iv.label
        if noise.confusion_rate > 0 or not np.allclose(conf, np.eye(len(classes))):
            label = classes[int(rng.choice(len(classes), p=conf[classes.index(label)]))]
        start = bounds[i]
        end = bounds[i + 1] if i + 1 < len(ivs) and ivs[i].end_s == ivs[i + 1].start_s else iv.end_s
        if out and out[-1].label == label and out[-1].end_s == start:
            out[-1] = Interval(out[-1].start_s, end, label)
        else:
            out.append(Interval(start, end, label))
    return AnnotationSet(name, track.track, tuple(out))


def simulate_annotators(
    posture: AnnotationSet,
    movement: AnnotationSet,
    noise: AnnotatorNoise,
    K: int = 3,
    seed: int = 0,
    meta: AnnotationSet | None = None,
) -> list[list[AnnotationSet]]:
    """K independent noisy copies of the truth tracks; meta is copied unchanged."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(K):
        name = f"annotator{k + 1}"
        sets = [_jitter_track(posture, noise, rng, name), _jitter_track(movement, noise, rng, name)]
        if meta is not None:
            sets.append(AnnotationSet(name, "meta", meta.intervals))
        out.append(sets)
    return out


def make_subject(scenario: Scenario, seed: int, subject_id: str, K: int = 3) -> Subject:
    ss = np.random.SeedSequence(seed)
    gen_seed, ann_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    inf = generate_infant(scenario, gen_seed, subject_id)
    anns = simulate_annotators(
        inf.posture, inf.movement, scenario.annotator_noise, K, ann_seed, meta=inf.meta
    )
    flat = tuple(a for sets in anns for a in sets)
    return Subject(inf.recording, flat, (inf.posture, inf.movement, inf.meta))


def make_dataset(scenario: Scenario, n_subjects: int, seed: int = 0, K: int = 3) -> list[Subject]:
    seeds = np.random.SeedSequence(seed).spawn(n_subjects)
    return [
        make_subject(scenario, int(s.generate_state(1)[0]), f"S{i + 1:02d}", K)
        for i, s in enumerate(seeds)
    ]


def write_dataset(root: str | Path, subjects: list[Subject], scenario: Scenario | None = None, seed: int | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        write_subject(root, s)
    if scenario is not None:
        (root / "scenario.json").write_text(
            json.dumps({"scenario": scenario.to_dict(), "seed": seed, "subjects": len(subjects)}, indent=2)
        )
