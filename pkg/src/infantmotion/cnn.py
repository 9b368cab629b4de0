"""Sensor-module / sensor-fusion / dilated temporal network.

A recording enters as frames of shape (F, 24, window_len) in the fixed
channel order. The sensor module (shared across sensors) runs three valid
2-D convolution paths over each sensor's 6 x window_len image: accelerometer
rows, gyroscope rows and a shared kernel spanning all six rows. Each path is
rectified and mean-pooled to one value per filter. Sensor features are
concatenated and fused to a frame embedding, optionally extended with a
one-hot posture condition, and a stack of residual dilated convolutions over
the frame sequence feeds a softmax head.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import HOP, POSTURE, WINDOW_LEN

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    sensors: tuple[int, ...] = (0, 1, 2, 3)
    accel_kernel: tuple[int, int] = (3, 5)
    gyro_kernel: tuple[int, int] = (3, 5)
    shared_kernel: tuple[int, int] = (6, 5)
    accel_filters: int = 8
    gyro_filters: int = 8
    shared_filters: int = 8
    conv_stride: int = 2
    fusion_width: int = 64
    temporal_width: int = 64
    temporal_kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    condition_dim: int = 0
    activation: str = "relu"
    window_len: int = WINDOW_LEN
    hop: int = HOP
    zero_init_head: bool = False

    def __post_init__(self):
        def fail(layer, msg):
            raise ValueError(f"invalid config for {layer}: {msg}")

        if self.n_classes < 2:
            fail("head", "need at least two classes")
        if not self.sensors or len(set(self.sensors)) != len(self.sensors):
            fail("sensor module", "sensors must be distinct and nonempty")
        if any(s not in range(4) for s in self.sensors):
            fail("sensor module", "sensor indices must be in 0..3")
        for name, (kh, kw), rows in (
            ("accel path", self.accel_kernel, 3),
            ("gyro path", self.gyro_kernel, 3),
            ("shared path", self.shared_kernel, 6),
        ):
            if not (1 <= kh <= rows and 1 <= kw <= self.window_len):
                fail(name, f"kernel {(kh, kw)} does not fit a {rows}x{self.window_len} input")
        if self.conv_stride < 1:
            fail("sensor module", "conv_stride must be >= 1")
        if min(self.accel_filters, self.gyro_filters, self.shared_filters, self.fusion_width) < 1:
            fail("sensor fusion", "widths must be positive")
        d = self.dilations
        if not d or any(x <= 0 or x & (x - 1) for x in d) or any(b <= a for a, b in zip(d, d[1:])):
            fail("temporal stack", "dilations must be strictly increasing powers of two")
        if self.temporal_kernel % 2 == 0 or self.temporal_kernel < 1:
            fail("temporal stack", "kernel size must be odd")
        if self.condition_dim not in (0, POSTURE.C):
            fail("temporal stack", f"condition_dim must be 0 or {POSTURE.C}")
        if self.activation not in ad.ACTIVATIONS:
            fail("activations", f"unknown activation {self.activation!r}")

    @property
    def sensor_feature_width(self) -> int:
        return self.accel_filters + self.gyro_filters + self.shared_filters

    @property
    def temporal_input_width(self) -> int:
        return self.fusion_width + self.condition_dim

    @property
    def receptive_field(self) -> int:
        return 1 + sum((self.temporal_kernel - 1) * d for d in self.dilations)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("sensors", "accel_kernel", "gyro_kernel", "shared_kernel", "dilations"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "sensor.accel.W": (cfg.accel_filters, 1) + tuple(cfg.accel_kernel),
        "sensor.accel.b": (cfg.accel_filters,),
        "sensor.gyro.W": (cfg.gyro_filters, 1) + tuple(cfg.gyro_kernel),
        "sensor.gyro.b": (cfg.gyro_filters,),
        "sensor.shared.W": (cfg.shared_filters, 1) + tuple(cfg.shared_kernel),
        "sensor.shared.b": (cfg.shared_filters,),
        "fusion.W": (len(cfg.sensors) * cfg.sensor_feature_width, cfg.fusion_width),
        "fusion.b": (cfg.fusion_width,),
        "temporal.in.W": (cfg.temporal_input_width, cfg.temporal_width),
        "temporal.in.b": (cfg.temporal_width,),
    }
    for i, _ in enumerate(cfg.dilations):
        shapes[f"temporal.block{i}.W"] = (cfg.temporal_kernel, cfg.temporal_width, cfg.temporal_width)
        shapes[f"temporal.block{i}.b"] = (cfg.temporal_width,)
    shapes["head.W"] = (cfg.temporal_width, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


@dataclass
class Network:
    config: ModelConfig
    params: dict[str, ad.Tensor]
    seed: int
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(24))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(24))

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self) -> "Network":
        return copy.deepcopy(self)


def build_model(config: ModelConfig, seed: int = 0) -> Network:
    """Instantiate parameters with He-normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".b") or (name.startswith("head.") and config.zero_init_head):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("sensor.") else int(np.prod(shape[:-1]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = ad.Tensor(data, requires_grad=True)
    return Network(config, params, seed)


def _sensor_images(net: Network, windows: np.ndarray) -> np.ndarray:
    cfg = net.config
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim != 3 or w.shape[1] != 24 or w.shape[2] != cfg.window_len:
        raise ValueError(f"expected frames of shape (F, 24, {cfg.window_len}), got {w.shape}")
    w = (w - net.input_mean[None, :, None]) / net.input_std[None, :, None]
    w = w.reshape(len(w), 4, 6, cfg.window_len)[:, list(cfg.sensors)]
    return w.reshape(-1, 1, 6, cfg.window_len)


def sensor_features(net: Network, windows: np.ndarray) -> ad.Tensor:
    """Sensor-module output of shape (F, n_sensors, sensor_feature_width)."""
    cfg = net.config
    p = net.params
    act = ad.ACTIVATIONS[cfg.activation]
    img = _sensor_images(net, windows)
    paths = []
    for name, rows in (("accel", slice(0, 3)), ("gyro", slice(3, 6)), ("shared", slice(0, 6))):
        x = ad.constant(np.ascontiguousarray(img[:, :, rows, :]))
        h = act(ad.conv2d(x, p[f"sensor.{name}.W"], p[f"sensor.{name}.b"], (1, cfg.conv_stride)))
        paths.append(ad.mean_pool(h, (2, 3)))
    feats = ad.concat(paths, axis=1)
    return ad.reshape(feats, (len(windows), len(cfg.sensors), cfg.sensor_feature_width))


def logits(net: Network, windows: np.ndarray, condition: np.ndarray | None = None) -> ad.Tensor:
    cfg = net.config
    p = net.params
    act = ad.ACTIVATIONS[cfg.activation]
    if (condition is None) != (cfg.condition_dim == 0):
        raise ValueError(
            "condition must be supplied iff the network has condition_dim > 0 "
            f"(condition_dim={cfg.condition_dim})"
        )
    F = len(windows)
    feats = sensor_features(net, windows)
    flat = ad.reshape(feats, (F, len(cfg.sensors) * cfg.sensor_feature_width))
    h = act(ad.dense(flat, p["fusion.W"], p["fusion.b"]))
    if condition is not None:
        condition = np.asarray(condition, dtype=np.float64)
        if condition.shape != (F, cfg.condition_dim):
            raise ValueError(f"condition must have shape {(F, cfg.condition_dim)}, got {condition.shape}")
        h = ad.concat([h, ad.constant(condition)], axis=1)
    h = ad.dense(h, p["temporal.in.W"], p["temporal.in.b"])
    for i, d in enumerate(cfg.dilations):
        h = ad.add(h, act(ad.dilated_conv1d(h, p[f"temporal.block{i}.W"], p[f"temporal.block{i}.b"], d)))
    return ad.dense(h, p["head.W"], p["head.b"])


def forward(net: Network, windows: np.ndarray, condition: np.ndarray | None = None) -> np.ndarray:
    """Per-frame class probabilities for one recording's frame sequence."""
    if len(windows) == 0:
        if (condition is None) != (net.config.condition_dim == 0):
            raise ValueError("condition must be supplied iff condition_dim > 0")
        return np.zeros((0, net.config.n_classes))
    return ad.softmax(logits(net, windows, condition).data)


def forward_batch(
    net: Network, batch: Sequence[np.ndarray], conditions: Sequence[np.ndarray | None] | None = None
) -> list[np.ndarray]:
    """Forward each recording of ``batch`` independently (no cross-recording context)."""
    conditions = conditions if conditions is not None else [None] * len(batch)
    return [forward(net, w, c) for w, c in zip(batch, conditions)]


@dataclass(frozen=True)
class TrainItem:
    """One recording's frames, soft labels and loss mask."""

    windows: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    condition: np.ndarray | None = None



@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    seed: int = 0
    chunk_frames: int | None = None  # None = one whole recording per step


def one_hot(labels: np.ndarray, C: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), C))
    ok = labels >= 0
    out[np.flatnonzero(ok), labels[ok]] = 1.0
    return out


def fit_input_norm(net: Network, items: Sequence[TrainItem]) -> None:
    allw = np.concatenate([it.windows for it in items if len(it.windows)], axis=0)
    mean = allw.mean(axis=(0, 2))
    std = allw.std(axis=(0, 2))
    net.input_mean = mean
    net.input_std = np.where(std > 1e-12, std, 1.0)


def _chunks(item: TrainItem, size: int | None) -> list[TrainItem]:
    if size is None or len(item.windows) <= size:
        return [item]
    out = []
    for s in range(0, len(item.windows), size):
        sl = slice(s, s + size)
        cond = item.condition[sl] if item.condition is not None else None
        out.append(TrainItem(item.windows[sl], item.targets[sl], item.mask[sl], cond))
    return out


def train(net: Network, dataset: Sequence[TrainItem], cfg: TrainConfig = TrainConfig()) -> tuple[Network, list[float]]:
    """Minimise mean soft-target cross-entropy with Adam; returns (net, per-epoch loss)."""
    items = [it for it in dataset if len(it.windows) and np.any(it.mask)]
    if not items:
        raise ValueError("empty training dataset")
    for it in items:
        sums = it.targets[it.mask].sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValueError("training targets must be probability vectors on labelled frames")
    fit_input_norm(net, items)
    steps = [c for it in items for c in _chunks(it, cfg.chunk_frames) if np.any(c.mask)]
    opt = ad.Adam(list(net.params.values()), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for _ in range(cfg.epochs):
        total, count = 0.0, 0
        for k in rng.permutation(len(steps)):
            it = steps[k]
            opt.zero_grad()
            loss = ad.softmax_cross_entropy(logits(net, it.windows, it.condition), it.targets, it.mask)
            loss.backward()
            opt.step()
            n = int(it.mask.sum())
            total += float(loss.data) * n
            count += n
        trace.append(total / count)
    return net, trace


def loss_value(net: Network, item: TrainItem) -> float:
    return float(ad.softmax_cross_entropy(logits(net, item.windows, item.condition), item.targets, item.mask).data)


@dataclass(frozen=True)
class GradCheck:
    groups: dict[str, float]
    max_error: float
    probed: int
    skipped: int


def _relu_pattern(net: Network, item: TrainItem) -> tuple[float, list[np.ndarray]]:
    with ad.record_relu_masks() as masks:
        value = loss_value(net, item)
    return value, list(masks)


def gradient_check(
    net: Network,
    item: TrainItem,
    eps: float = 1e-5,
    max_entries: int | None = 16,
    seed: int = 0,
) -> GradCheck:
    """Compare analytic gradients with central differences, per parameter group.

    A group's error is ``max|a - n| / max(max|a|, max|n|)`` over its probed
    entries; at most ``max_entries`` random entries per group are probed (all
    when None). A probe whose +/-eps evaluations change any rectifier's
    on/off pattern straddles a kink, where the difference quotient is not a
    derivative estimate; such probes are skipped and counted.
    """
    for p in net.params.values():
        p.grad = None
    with ad.record_relu_masks() as base:
        loss = ad.softmax_cross_entropy(logits(net, item.windows, item.condition), item.targets, item.mask)
    base = list(base)
    loss.backward()
    rng = np.random.default_rng(seed)
    groups = {}
    probed = skipped = 0
    for name, p in net.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a, num = [], []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up, up_masks = _relu_pattern(net, item)
            flat[i] = orig - eps
            down, down_masks = _relu_pattern(net, item)
            flat[i] = orig
            probed += 1
            crossed = any(
                not np.array_equal(m0, m) for ms in (up_masks, down_masks) for m0, m in zip(base, ms)
            )
            if crossed:
                skipped += 1
                continue
            a.append(analytic.reshape(-1)[i])
            num.append((up - down) / (2 * eps))
        a, num = np.asarray(a), np.asarray(num)
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
        groups[name] = float(np.abs(a - num).max() / scale) if scale > 0 else 0.0
    for p in net.params.values():
        p.grad = None
    return GradCheck(groups, max(groups.values()), probed, skipped)


def save_checkpoint(net: Network, path: str | Path) -> None:
    arrays = {f"param:{k}": v.data for k, v in net.params.items()}
    arrays["buffer:input_mean"] = net.input_mean
    arrays["buffer:input_std"] = net.input_std
    meta = {"version": CHECKPOINT_VERSION, "seed": net.seed, "config": net.config.to_dict()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path: str | Path) -> Network:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig.from_dict(meta["config"])
        params = {
            name: ad.Tensor(z[f"param:{name}"].copy(), requires_grad=True) for name in parameter_shapes(cfg)
        }
        return Network(cfg, params, meta["seed"], z["buffer:input_mean"].copy(), z["buffer:input_std"].copy())


def predict_recording(
    posture_net: Network, movement_net: Network, windows: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Posture first; its argmax one-hot conditions the movement network.

    Returns (posture labels, movement labels, posture probs, movement probs).
    """
    pc, mc = posture_net.config, movement_net.config
    if (pc.window_len, pc.hop) != (mc.window_len, mc.hop):
        raise ValueError("posture and movement networks were trained with different windowing")
    if mc.condition_dim != pc.n_classes:
        raise ValueError("movement network must be conditioned on the posture classes")
    p_post = forward(posture_net, windows)
    post = np.argmax(p_post, axis=1)
    p_mov = forward(movement_net, windows, one_hot(post, pc.n_classes))
    return post, np.argmax(p_mov, axis=1), p_post, p_mov


def export_loss_trace(trace: Sequence[float], stream) -> None:
    stream.write("epoch,loss\n")
    for i, v in enumerate(trace, start=1):
        stream.write(f"{i},{v!r}\n")
