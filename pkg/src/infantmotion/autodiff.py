"""Minimal reverse-mode differentiation over numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a closure
that pushes the output gradient back to them. Only the layer types the
classifier needs are provided.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, parents if needs else (), backward if needs else None)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum (same shapes), used for residual connections."""
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for x of shape (N, in)."""
    out = x.data @ W.data + b.data

    def backward(g):
        gx = g @ W.data.T if x.requires_grad else None
        return gx, x.data.T @ g, g.sum(axis=0)

    return _make(out, (x, W, b), backward)


_relu_masks: list | None = None


class record_relu_masks:
    """Context manager collecting the activation pattern of every relu call."""

    def __enter__(self) -> list:
        global _relu_masks
        self._saved = _relu_masks
        _relu_masks = []
        return _relu_masks

    def __exit__(self, *exc) -> None:
        global _relu_masks
        _relu_masks = self._saved


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_masks is not None:
        _relu_masks.append(mask)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"relu": relu, "identity": identity}


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


def mean_pool(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def backward(g):
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape) / count,)

    return _make(x.data.mean(axis=axes), (x,), backward)


def conv2d(x: Tensor, W: Tensor, b: Tensor, stride: tuple[int, int] = (1, 1)) -> Tensor:
    """Valid, strided 2-D cross-correlation.

    x: (B, Cin, H, W_in), W: (F, Cin, kh, kw), b: (F,) -> (B, F, Ho, Wo)
    with Ho = (H - kh) // sh + 1 and Wo = (W_in - kw) // sw + 1.
    """
    B, Cin, H, Win = x.shape
    F, Cw, kh, kw = W.shape
    sh, sw = stride
    if Cw != Cin or kh > H or kw > Win:
        raise ValueError(f"conv2d: kernel {W.shape} does not fit input {x.shape}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * kh * kw)
    Wm = W.data.reshape(F, -1)
    out = (cols @ Wm.T + b.data).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gW = (gm.T @ cols).reshape(W.shape)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += np.einsum(
                        "bfhw,fc->bchw", g, W.data[:, :, i, j]
                    )
        return gx, gW, gb

    return _make(np.ascontiguousarray(out), (x, W, b), backward)


def dilated_conv1d(x: Tensor, W: Tensor, b: Tensor, dilation: int) -> Tensor:
    """Centred dilated 1-D convolution over time with zero padding.

    x: (T, Cin), W: (k, Cin, Cout) with odd k, b: (Cout,) -> (T, Cout).
    Output t sees inputs t + (j - (k-1)/2) * dilation.
    """
    T, Cin = x.shape
    k, Cw, Cout = W.shape
    if Cw != Cin or k % 2 == 0:
        raise ValueError(f"dilated_conv1d: kernel {W.shape} incompatible with input {x.shape}")
    pad = (k - 1) // 2 * dilation
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    out = np.tile(b.data, (T, 1))
    for j in range(k):
        out += xp[j * dilation : j * dilation + T] @ W.data[j]

    def backward(g):
        gW = np.stack([xp[j * dilation : j * dilation + T].T @ g for j in range(k)])
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j * dilation : j * dilation + T] += g @ W.data[j].T
            gx = gxp[pad : pad + T]
        return gx, gW, g.sum(axis=0)

    return _make(out, (x, W, b), backward)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None
) -> Tensor:
    """Mean over unmasked rows of ``-sum_c q_c log softmax(z)_c`` for soft targets q."""
    z = logits.data
    targets = np.asarray(targets, dtype=np.float64)
    if mask is None:
        mask = np.ones(len(z), dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no labelled rows in the loss")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -np.sum(targets[mask] * logp[mask]) / n

    def backward(g):
        p = np.exp(logp)
        grad = (p * targets.sum(axis=1, keepdims=True) - targets) * mask[:, None] / n
        return (g * grad,)

    return _make(np.array(loss), (logits,), backward)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
