"""Per-channel window features and global standardisation for the SVM path."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, TextIO

import numpy as np

from .core import CHANNELS, Sensor

NFFT = 128

FEATURE_NAMES = (
    "mean",
    "variance",
    "max",
    "min",
    "sma",
    "energy",
    "iqr",
    "skewness",
    "kurtosis",
    "dominant_freq",
    "mean_freq",
    "freq_skewness",
    "freq_kurtosis",
    "spectral_entropy",
)
N_FEATURES = len(FEATURE_NAMES)


class Spectrum(NamedTuple):
    freqs: np.ndarray
    magnitudes: np.ndarray


def magnitude_spectrum(window: np.ndarray, rate: float = 52.0, nfft: int = NFFT) -> Spectrum:
    """One-sided DFT magnitudes of ``window`` zero-padded to ``nfft`` samples."""
    x = np.asarray(window, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN in window")
    mags = np.abs(np.fft.rfft(x, n=nfft, axis=-1))
    return Spectrum(np.fft.rfftfreq(nfft, d=1.0 / rate), mags)


def _moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    constant = np.all(x == x[..., :1], axis=-1)
    mean = np.where(constant, x[..., 0], x.mean(axis=-1))
    d = x - mean[..., None]
    m2 = np.mean(d**2, axis=-1)
    m3 = np.mean(d**3, axis=-1)
    m4 = np.mean(d**4, axis=-1)
    ok = m2 > 0
    safe = np.where(ok, m2, 1.0)
    skew = np.where(ok, m3 / safe**1.5, 0.0)
    kurt = np.where(ok, m4 / safe**2 - 3.0, 0.0)
    return mean, m2, skew, kurt


def _spectral_shape(mags: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Dominant/mean frequency, frequency skewness/kurtosis and entropy over non-DC bins."""
    m = mags[..., 1:]
    f = freqs[1:]
    total = m.sum(axis=-1)
    ok = total > 0
    q = m / np.where(ok, total, 1.0)[..., None]
    dominant = np.where(ok, f[np.argmax(m, axis=-1)], 0.0)
    mu = (q * f).sum(axis=-1)
    d = f - mu[..., None]
    var = (q * d**2).sum(axis=-1)
    spread = var > 0
    sv = np.where(spread, var, 1.0)
    fskew = np.where(spread, (q * d**3).sum(axis=-1) / sv**1.5, 0.0)
    fkurt = np.where(spread, (q * d**4).sum(axis=-1) / sv**2 - 3.0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(q > 0, q * np.log(q), 0.0)
    entropy = -plogp.sum(axis=-1)
    out = np.stack([dominant, mu, fskew, fkurt, entropy], axis=-1)
    return np.where(ok[..., None], out, 0.0)


def channel_features(window: np.ndarray, rate: float = 52.0) -> np.ndarray:
    """The 14 features of each window along the last axis.

    Accepts any leading shape; returns ``(..., 14)`` in :data:`FEATURE_NAMES`
    order. The spectrum is taken of the mean-removed window so that the
    frequency features describe the dynamics only.
    """
    x = np.asarray(window, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN in window")
    mean, var, skew, kurt = _moments(x)
    q75, q25 = np.percentile(x, [75, 25], axis=-1)
    spec = magnitude_spectrum(x - mean[..., None], rate)
    time_feats = np.stack(
        [
            mean,
            var,
            x.max(axis=-1),
            x.min(axis=-1),
            np.abs(x).mean(axis=-1),
            np.mean(x**2, axis=-1),
            q75 - q25,
            skew,
            kurt,
        ],
        axis=-1,
    )
    return np.concatenate([time_feats, _spectral_shape(spec.magnitudes, spec.freqs)], axis=-1)


SENSOR_SUBSETS = {
    "all": (Sensor.LeftArm, Sensor.RightArm, Sensor.LeftLeg, Sensor.RightLeg),
    "left_arm": (Sensor.LeftArm,),
    "right_arm": (Sensor.RightArm,),
    "left_leg": (Sensor.LeftLeg,),
    "right_leg": (Sensor.RightLeg,),
    "arms": (Sensor.LeftArm, Sensor.RightArm),
    "legs": (Sensor.LeftLeg, Sensor.RightLeg),
    "arm_leg": (Sensor.LeftArm, Sensor.RightLeg),
}


def parse_sensors(spec: str | Sequence[Sensor]) -> tuple[Sensor, ...]:
    """Resolve a subset name (``arms``) or ``+``-joined sensor names (``LeftArm+RightLeg``)."""
    if not isinstance(spec, str):
        sensors = tuple(spec)
    elif spec in SENSOR_SUBSETS:
        sensors = SENSOR_SUBSETS[spec]
    else:
        names = [s.strip() for s in spec.split("+") if s.strip()]
        try:
            sensors = tuple(Sensor[n] for n in names)
        except KeyError as exc:
            raise ValueError(f"unknown sensor {exc.args[0]!r} in {spec!r}") from None
    if not sensors:
        raise ValueError("empty sensor configuration")
    return tuple(sorted(set(sensors), key=lambda s: s.value))


def channel_indices(sensors: Sequence[Sensor]) -> np.ndarray:
    chosen = {s for s in sensors}
    return np.array([c.index for c in CHANNELS if c.sensor in chosen], dtype=np.int64)


def feature_names(sensors: Sequence[Sensor] = SENSOR_SUBSETS["all"]) -> list[str]:
    return [
        f"{CHANNELS[c].name}__{f}" for c in channel_indices(sensors) for f in FEATURE_NAMES
    ]


def frame_features(
    windows: np.ndarray, rate: float = 52.0, sensors: Sequence[Sensor] = SENSOR_SUBSETS["all"]
) -> np.ndarray:
    """Feature matrix for frames of shape ``(F, 24, window_len)``.

    Channels outside ``sensors`` are dropped, so the width is
    ``14 * 6 * len(sensors)``; a single frame ``(24, window_len)`` gives a vector.
    """
    w = np.asarray(windows)
    single = w.ndim == 2
    if single:
        w = w[None]
    feats = channel_features(w[:, channel_indices(sensors), :], rate)
    out = feats.reshape(len(w), -1)
    return out[0] if single else out


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    clamped: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"expected {self.mean.shape[0]} features, got {x.shape[-1]}")
        return (x - self.mean) / self.std


def fit_standardizer(train_features: np.ndarray) -> Standardizer:
    x = np.asarray(train_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("cannot fit a standardizer on an empty training set")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    clamped = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(clamped, 1.0, std)
    return Standardizer(mean, std, clamped)


def apply_standardizer(s: Standardizer, x: np.ndarray) -> np.ndarray:
    return s.apply(x)


def export_feature_matrix(
    features: np.ndarray,
    stream: TextIO,
    sensors: Sequence[Sensor] = SENSOR_SUBSETS["all"],
    row_ids: Sequence[str] | None = None,
) -> None:
    """Write a feature matrix as a CSV table with one named column per feature."""
    names = feature_names(sensors)
    if features.shape[1] != len(names):
        raise ValueError("feature width does not match the sensor configuration")
    stream.write(",".join(["frame"] + names) + "\n")
    for i, row in enumerate(features):
        rid = row_ids[i] if row_ids is not None else str(i)
        stream.write(rid + "," + ",".join(repr(float(v)) for v in row) + "\n")
