"""Recordings, annotation tracks, frame windowing and vote priors.

Time is kept as sample indices. Annotation boundaries given in seconds are
converted once with the recording's nominal rate (``round(seconds * rate)``)
and intervals cover the half-open sample range ``[start, end)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

DEFAULT_RATE = 52.0
WINDOW_LEN = 120
HOP = 60


class FormatError(ValueError):
    """Raised for malformed recording or annotation files."""


class Sensor(Enum):
    LeftArm = 0
    RightArm = 1
    LeftLeg = 2
    RightLeg = 3


class Modality(Enum):
    Accel = 0
    Gyro = 1


class Axis(Enum):
    X = 0
    Y = 1
    Z = 2


@dataclass(frozen=True, order=True)
class ChannelId:
    sensor: Sensor
    modality: Modality
    axis: Axis

    @property
    def index(self) -> int:
        # sensor-major, modality-middle, axis-minor
        return self.sensor.value * 6 + self.modality.value * 3 + self.axis.value

    @property
    def name(self) -> str:
        return f"{self.sensor.name}_{self.modality.name}_{self.axis.name}"


CHANNELS: tuple[ChannelId, ...] = tuple(
    ChannelId(s, m, a) for s in Sensor for m in Modality for a in Axis
)
CHANNEL_NAMES: tuple[str, ...] = tuple(c.name for c in CHANNELS)
N_CHANNELS = len(CHANNELS)


@dataclass(frozen=True)
class ClassSet:
    track: str
    classes: tuple[str, ...]

    @property
    def C(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not a {self.track} class") from None


POSTURE = ClassSet("posture", ("prone", "supine", "side L", "side R", "crawl posture"))
MOVEMENT = ClassSet(
    "movement",
    (
        "macro still",
        "turn L",
        "turn R",
        "pivot L",
        "pivot R",
        "crawl proto",
        "crawl commando",
    ),
)
META_TAGS = ("carried", "out-of-camera", "sensor-drop")
TRACKS = ("posture", "movement", "meta")
CLASS_SETS = {"posture": POSTURE, "movement": MOVEMENT}


def class_set(track: str) -> ClassSet:
    try:
        return CLASS_SETS[track]
    except KeyError:
        raise KeyError(f"no class set for track {track!r}") from None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Recording:
    subject_id: str
    sample_rate: float
    samples: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[1] != N_CHANNELS:
            raise ValueError(f"samples must be T x {N_CHANNELS}, got {samples.shape}")
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != (samples.shape[0],):
            raise ValueError("valid mask length must equal the number of samples")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return self.T / self.sample_rate


def _parse_float(text: str, lineno: int) -> float:
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise FormatError(f"line {lineno}: cannot parse value {text!r}") from None
    if math.isinf(value):
        raise FormatError(f"line {lineno}: infinite value")
    return value


def parse_recording(
    stream: TextIO | str | Path, subject_id: str | None = None
) -> Recording:
    """Parse a recording table.

    A leading ``# sample_rate=<Hz>`` comment sets the rate (default 52 Hz).
    Rows must have strictly increasing ``t_index``; skipped indices become
    invalid NaN rows. Any NaN cell marks its row invalid.
    """
    if isinstance(stream, (str, Path)):
        path = Path(stream)
        if subject_id is None:
            subject_id = path.stem
        with open(path, newline="") as fh:
            return parse_recording(fh, subject_id)

    rate = DEFAULT_RATE
    lines = stream.read().splitlines()
    lineno = 0
    while lineno < len(lines) and lines[lineno].startswith("#"):
        comment = lines[lineno][1:].strip()
        if comment.startswith("sample_rate="):
            try:
                rate = float(comment.split("=", 1)[1])
            except ValueError:
                raise FormatError(f"line {lineno + 1}: bad sample_rate") from None
        lineno += 1
    reader = csv.reader(lines[lineno:])
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise FormatError("missing header row") from None
    header_line = lineno + 1
    if not header or header[0] != "t_index":
        raise FormatError(f"line {header_line}: first column must be t_index")
    missing = [n for n in CHANNEL_NAMES if n not in header]
    if missing:
        raise FormatError(f"missing channel column(s): {', '.join(missing)}")
    if len(set(header)) != len(header):
        raise FormatError(f"line {header_line}: duplicate column names")
    cols = [header.index(n) for n in CHANNEL_NAMES]

    indices: list[int] = []
    rows: list[list[float]] = []
    for offset, row in enumerate(reader):
        line = header_line + 1 + offset
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise FormatError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        try:
            t = int(row[0])
        except ValueError:
            raise FormatError(f"line {line}: bad t_index {row[0]!r}") from None
        if t < 0 or (indices and t <= indices[-1]):
            raise FormatError(f"line {line}: non-monotone timestamp {t}")
        indices.append(t)
        rows.append([_parse_float(row[c], line) for c in cols])

    T = indices[-1] + 1 if indices else 0
    samples = np.full((T, N_CHANNELS), np.nan)
    if rows:
        samples[np.asarray(indices)] = np.asarray(rows, dtype=np.float64)
    valid = ~np.isnan(samples).any(axis=1)
    return Recording(subject_id or "subject", rate, samples, valid)


def serialize_recording(rec: Recording, stream: TextIO | None = None) -> str | None:
    """Write ``rec`` in the recording table format.

    Values are written with ``repr`` so parsing reproduces them bit-exactly.
    Rows flagged invalid but holding only finite values are written as NaN,
    since NaN is the only invalidity marker the format carries.
    """
    out = stream if stream is not None else io.StringIO()
    out.write(f"# sample_rate={rec.sample_rate!r}\n")
    out.write(",".join(("t_index",) + CHANNEL_NAMES) + "\n")
    for t in range(rec.T):
        row = rec.samples[t]
        if not rec.valid[t] and not np.isnan(row).any():
            cells = ["nan"] * N_CHANNELS
        else:
            cells = ["nan" if math.isnan(v) else repr(float(v)) for v in row]
        out.write(f"{t}," + ",".join(cells) + "\n")
    if stream is None:
        return out.getvalue()
    return None


@dataclass(frozen=True)
class Interval:
    start_s: float
    end_s: float
    label: str


@dataclass(frozen=True)
class AnnotationSet:
    annotator_id: str
    track: str
    intervals: tuple[Interval, ...] = ()

    def __post_init__(self):
        if self.track not in TRACKS:
            raise FormatError(f"unknown track {self.track!r}")
        allowed = META_TAGS if self.track == "meta" else class_set(self.track).classes
        ivs = tuple(sorted(self.intervals, key=lambda iv: (iv.start_s, iv.end_s)))
        for iv in ivs:
            if not iv.start_s < iv.end_s:
                raise FormatError(f"interval {iv} has start >= end")
            if iv.label not in allowed:
                raise FormatError(f"label {iv.label!r} not valid for track {self.track}")
        for a, b in zip(ivs, ivs[1:]):
            if b.start_s < a.end_s:
                raise FormatError(
                    f"overlapping intervals for {self.annotator_id}/{self.track}: {a}, {b}"
                )
        object.__setattr__(self, "intervals", ivs)

    def sample_spans(self, rate: float) -> list[tuple[int, int, str]]:
        return [
            (int(round(iv.start_s * rate)), int(round(iv.end_s * rate)), iv.label)
            for iv in self.intervals
        ]


def parse_annotations(stream: TextIO | str | Path) -> list[AnnotationSet]:
    """Parse line-delimited annotation records into one set per (annotator, track)."""
    if isinstance(stream, (str, Path)):
        with open(stream) as fh:
            return parse_annotations(fh)
    grouped: dict[tuple[str, str], list[Interval]] = {}
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            key = (str(rec["annotator"]), str(rec["track"]))
            iv = Interval(float(rec["start_s"]), float(rec["end_s"]), str(rec["label"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"line {lineno}: bad annotation record ({exc})") from None
        grouped.setdefault(key, []).append(iv)
    return [AnnotationSet(a, t, tuple(ivs)) for (a, t), ivs in grouped.items()]


def serialize_annotations(sets: Iterable[AnnotationSet]) -> str:
    lines = []
    for s in sets:
        for iv in s.intervals:
            lines.append(
                json.dumps(
                    {
                        "annotator": s.annotator_id,
                        "track": s.track,
                        "start_s": iv.start_s,
                        "end_s": iv.end_s,
                        "label": iv.label,
                    }
                )
            )
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class FrameIndex:
    window_len: int
    hop: int
    starts: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.starts)

    def spans_s(self, rate: float) -> list[tuple[float, float]]:
        return [(s / rate, (s + self.window_len) / rate) for s in self.starts]


def window_frames(
    recording: Recording | int, window_len: int = WINDOW_LEN, hop: int = HOP
) -> FrameIndex:
    """Frame start offsets for windows of ``window_len`` samples every ``hop``."""
    if window_len <= 0 or not 0 < hop <= window_len:
        raise ValueError("need window_len > 0 and 0 < hop <= window_len")
    T = recording if isinstance(recording, int) else recording.T
    n = (T - window_len) // hop + 1 if T >= window_len else 0
    return FrameIndex(window_len, hop, _frozen(np.arange(n, dtype=np.int64) * hop))


def frame_windows(recording: Recording, frames: FrameIndex) -> np.ndarray:
    """Sample windows as an array of shape (frames, channels, window_len)."""
    idx = frames.starts[:, None] + np.arange(frames.window_len)[None, :]
    return np.ascontiguousarray(recording.samples[idx].transpose(0, 2, 1))


def frame_label(
    track: AnnotationSet, frame_span: tuple[float, float], rate: float = DEFAULT_RATE
) -> str | None:
    """Class covering most samples of ``frame_span``; ties go to the earlier interval."""
    lo, hi = int(round(frame_span[0] * rate)), int(round(frame_span[1] * rate))
    cover: dict[str, int] = {}
    first: dict[str, int] = {}
    for start, end, label in track.sample_spans(rate):
        n = min(end, hi) - max(start, lo)
        if n > 0:
            cover[label] = cover.get(label, 0) + n
            first.setdefault(label, start)
    if not cover:
        return None
    return min(cover, key=lambda c: (-cover[c], first[c]))


def rasterize(track: AnnotationSet, n_samples: int, labels: Sequence[str], rate: float) -> np.ndarray:
    """Per-sample label index (−1 where unannotated)."""
    out = np.full(n_samples, -1, dtype=np.int64)
    lookup = {name: i for i, name in enumerate(labels)}
    for start, end, label in track.sample_spans(rate):
        out[max(start, 0) : max(min(end, n_samples), 0)] = lookup[label]
    return out


def frame_labels(
    track: AnnotationSet, frames: FrameIndex, rate: float, n_samples: int
) -> np.ndarray:
    """Vectorised :func:`frame_label` returning class indices (−1 for none)."""
    cs = class_set(track.track)
    raster = rasterize(track, n_samples, cs.classes, rate)
    onehot = np.zeros((n_samples + 1, cs.C), dtype=np.int64)
    known = raster >= 0
    onehot[1:][known, raster[known]] = 1
    cum = np.cumsum(onehot, axis=0)
    counts = cum[frames.starts + frames.window_len] - cum[frames.starts]
    out = np.full(len(frames), -1, dtype=np.int64)
    top = counts.max(axis=1) if len(frames) else np.zeros(0, dtype=np.int64)
    for f in range(len(frames)):
        if top[f] == 0:
            continue
        winners = np.flatnonzero(counts[f] == top[f])
        if len(winners) == 1:
            out[f] = winners[0]
        else:
            seg = raster[frames.starts[f] : frames.starts[f] + frames.window_len]
            firsts = [np.argmax(seg == w) for w in winners]
            out[f] = winners[int(np.argmin(firsts))]
    return out


def vote_priors(labels: Sequence[str | None], classes: ClassSet) -> np.ndarray | None:
    """Vote-share prior over ``classes``; None marks an unusable (all-none) frame."""
    votes = np.zeros(classes.C)
    for lab in labels:
        if lab is not None:
            votes[classes.index(lab)] += 1
    total = votes.sum()
    if total == 0:
        return None
    return votes / total


def vote_prior_matrix(label_idx: np.ndarray, C: int) -> tuple[np.ndarray, np.ndarray]:
    """Priors for a (K annotators, F frames) index array.

    Returns ``(priors, labeled)`` where rows of ``priors`` with no votes are
    all-zero and ``labeled`` flags the rows that carry at least one vote.
    """
    label_idx = np.atleast_2d(label_idx)
    F = label_idx.shape[1]
    votes = np.zeros((F, C))
    for row in label_idx:
        ok = row >= 0
        np.add.at(votes, (np.flatnonzero(ok), row[ok]), 1.0)
    total = votes.sum(axis=1)
    labeled = total > 0
    priors = np.zeros_like(votes)
    priors[labeled] = votes[labeled] / total[labeled, None]
    return priors, labeled


def usable_mask(
    meta_tracks: Iterable[AnnotationSet], frames: FrameIndex, recording: Recording
) -> np.ndarray:
    """True for frames with no meta-tagged and no invalid sample."""
    bad = ~recording.valid.copy()
    for track in meta_tracks:
        for start, end, _ in track.sample_spans(recording.sample_rate):
            bad[max(start, 0) : max(min(end, recording.T), 0)] = True
    cum = np.concatenate([[0], np.cumsum(bad)])
    return (cum[frames.starts + frames.window_len] - cum[frames.starts]) == 0


@dataclass(frozen=True)
class Subject:
    """One session: its recording plus every annotator's tracks."""

    recording: Recording
    annotations: tuple[AnnotationSet, ...]
    truth: tuple[AnnotationSet, ...] = ()

    @property
    def subject_id(self) -> str:
        return self.recording.subject_id

    @property
    def annotators(self) -> list[str]:
        return sorted({a.annotator_id for a in self.annotations})

    def track(self, annotator: str, track: str) -> AnnotationSet:
        for a in self.annotations:
            if a.annotator_id == annotator and a.track == track:
                return a
        return AnnotationSet(annotator, track, ())

    def meta_tracks(self) -> list[AnnotationSet]:
        return [a for a in self.annotations if a.track == "meta"]


@dataclass(frozen=True)
class SubjectFrames:
    """Frame-level view of a subject used by the classifiers and the harness."""

    subject_id: str
    frames: FrameIndex
    windows: np.ndarray  # (F, 24, window_len), invalid samples zeroed
    usable: np.ndarray  # (F,)
    votes: dict  # track -> (K, F) class indices, -1 for none
    truth: dict  # track -> (F,) class indices from the truth file, if any


def subject_frames(
    subject: Subject, window_len: int = WINDOW_LEN, hop: int = HOP
) -> SubjectFrames:
    rec = subject.recording
    frames = window_frames(rec, window_len, hop)
    clean = np.where(rec.valid[:, None], rec.samples, 0.0)
    windows = frame_windows(
        Recording(rec.subject_id, rec.sample_rate, clean, rec.valid), frames
    )
    usable = usable_mask(subject.meta_tracks(), frames, rec)
    votes = {}
    truth = {}
    for track in ("posture", "movement"):
        votes[track] = np.stack(
            [
                frame_labels(subject.track(a, track), frames, rec.sample_rate, rec.T)
                for a in subject.annotators
            ]
        ) if subject.annotators else np.zeros((0, len(frames)), dtype=np.int64)
        for t in subject.truth:
            if t.track == track:
                truth[track] = frame_labels(t, frames, rec.sample_rate, rec.T)
    return SubjectFrames(rec.subject_id, frames, windows, usable, votes, truth)


def load_dataset(root: str | Path) -> list[Subject]:
    """Load ``recordings/*.csv`` with matching ``annotations/<id>__*.jsonl`` and ``truth/<id>.jsonl``."""
    root = Path(root)
    rec_dir = root / "recordings"
    if not rec_dir.is_dir():
        raise FileNotFoundError(f"{rec_dir} does not exist")
    subjects = []
    for path in sorted(rec_dir.glob("*.csv")):
        rec = parse_recording(path)
        anns: list[AnnotationSet] = []
        for ann_path in sorted((root / "annotations").glob(f"{rec.subject_id}__*.jsonl")):
            anns.extend(parse_annotations(ann_path))
        truth_path = root / "truth" / f"{rec.subject_id}.jsonl"
        truth = tuple(parse_annotations(truth_path)) if truth_path.exists() else ()
        subjects.append(Subject(rec, tuple(anns), truth))
    return subjects


def write_subject(root: str | Path, subject: Subject) -> None:
    root = Path(root)
    for sub in ("recordings", "annotations", "truth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    sid = subject.subject_id
    with open(root / "recordings" / f"{sid}.csv", "w", newline="") as fh:
        serialize_recording(subject.recording, fh)
    for annotator in subject.annotators:
        sets = [a for a in subject.annotations if a.annotator_id == annotator]
        (root / "annotations" / f"{sid}__{annotator}.jsonl").write_text(
            serialize_annotations(sets)
        )
    if subject.truth:
        (root / "truth" / f"{sid}.jsonl").write_text(serialize_annotations(subject.truth))
