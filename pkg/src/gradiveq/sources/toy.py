"""A one-conv-layer classifier with hand-written backprop.

Architecture: 8x8x3 image -> 3x3 valid conv with 8 filters (+bias) -> tanh ->
dense 288 -> 2 logits -> softmax cross-entropy.  The conv weight is the only
convolutional layer; its bias and the dense parameters are passthrough.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..layout import FlatLayout, LayerShape

IMAGE = (8, 8, 3)
CONV = LayerShape(3, 3, 3, 8)
N_CLASSES = 2
_OUT = IMAGE[0] - CONV.height + 1
HIDDEN = _OUT * _OUT * CONV.filters


@dataclass(frozen=True, eq=False)
class ToyTask:
    images: np.ndarray  # (S, 8, 8, 3)
    labels: np.ndarray  # (S,)

    def shard(self, n: int, n_nodes: int) -> np.ndarray:
        """Indices owned by node ``n``: every N-th sample."""
        return np.arange(n, self.labels.size, n_nodes)

    def batch(self, n: int, n_nodes: int, t: int, size: int, seed: int = 0):
        idx = self.shard(n, n_nodes)
        rng = np.random.default_rng([seed, 2, t, n])
        pick = idx[rng.choice(idx.size, size=min(size, idx.size), replace=False)]
        return self.images[pick], self.labels[pick]


def smooth(a, sigma: float, axes=(1, 2)):
    """Separable periodic Gaussian blur with unit output variance per pixel."""
    if sigma <= 0:
        return a
    radius = int(np.ceil(3 * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= np.sqrt(np.sum(taps ** 2))  # keeps unit variance for white input
    for ax in axes:
        n = a.shape[ax]
        out = np.zeros_like(a)
        for k, w in zip(range(-radius, radius + 1), taps):
            out += w * np.take(a, (np.arange(n) + k) % n, axis=ax)
        a = out
    return a


def make_task(seed: int = 0, n_samples: int = 1200, template_scale: float = 0.35, noise: float = 1.0,
              smoothness: float = 4.0, label_noise: float = 0.1) -> ToyTask:
    """Two class templates plus per-image noise, both spatially smooth Gaussian fields.

    Labels alternate; a ``label_noise`` fraction of them is flipped so the
    training loss has a nonzero floor.
    """
    rng = np.random.default_rng([seed, 3])
    templates = template_scale * smooth(rng.normal(size=(N_CLASSES,) + IMAGE), smoothness)
    labels = np.arange(n_samples) % N_CLASSES
    images = templates[labels] + noise * smooth(rng.normal(size=(n_samples,) + IMAGE), smoothness)
    flip = rng.random(n_samples) < label_noise
    labels = np.where(flip, 1 - labels, labels)
    return ToyTask(images, labels)


@dataclass(frozen=True, eq=False)
class ToyModel:
    conv_w: np.ndarray  # (H, W, D, F)
    conv_b: np.ndarray  # (F,)
    dense_w: np.ndarray  # (HIDDEN, classes)
    dense_b: np.ndarray  # (classes,)
    lr: float = 0.05

    layout = FlatLayout((CONV,), passthrough=CONV.filters + HIDDEN * N_CLASSES + N_CLASSES)

    @classmethod
    def init(cls, seed: int = 0, lr: float = 0.05, scale: float = 1.0) -> "ToyModel":
        rng = np.random.default_rng([seed, 4])
        fan_in = CONV.height * CONV.width * CONV.depth
        return cls(
            conv_w=scale * rng.normal(size=CONV.shape) / np.sqrt(fan_in),
            conv_b=np.zeros(CONV.filters),
            dense_w=scale * rng.normal(size=(HIDDEN, N_CLASSES)) / np.sqrt(HIDDEN),
            dense_b=np.zeros(N_CLASSES),
            lr=lr,
        )

    @classmethod
    def zeros(cls, lr: float = 0.05) -> "ToyModel":
        return cls(np.zeros(CONV.shape), np.zeros(CONV.filters), np.zeros((HIDDEN, N_CLASSES)),
                   np.zeros(N_CLASSES), lr)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.conv_w.reshape(-1), self.conv_b, self.dense_w.reshape(-1), self.dense_b])

    def with_vector(self, v) -> "ToyModel":
        v = np.asarray(v, dtype=np.float64)
        if v.size != self.layout.size:
            raise ValueError(f"parameter vector of {v.size} values, model has {self.layout.size}")
        sizes = np.cumsum([CONV.size, CONV.filters, HIDDEN * N_CLASSES])
        a, b, c = sizes
        return replace(self, conv_w=v[:a].reshape(CONV.shape).copy(), conv_b=v[a:b].copy(),
                       dense_w=v[b:c].reshape(HIDDEN, N_CLASSES).copy(), dense_b=v[c:].copy())


def _patches(x):
    """im2col: (batch, out, out, H*W*D) receptive fields in (h, w, d) order."""
    win = np.lib.stride_tricks.sliding_window_view(x, (CONV.height, CONV.width), axis=(1, 2))
    # (batch, out, out, D, H, W) -> (batch, out, out, H, W, D)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(x.shape[0], _OUT, _OUT, -1)


def _forward(model: ToyModel, x, patches=None):
    batch = x.shape[0]
    if patches is None:
        patches = _patches(x)
    z = patches @ model.conv_w.reshape(-1, CONV.filters) + model.conv_b
    a = np.tanh(z)
    logits = a.reshape(batch, -1) @ model.dense_w + model.dense_b
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return a, p


def toy_loss(model: ToyModel, x, y) -> float:
    _, p = _forward(model, np.asarray(x, dtype=np.float64))
    return float(-np.mean(np.log(p[np.arange(len(y)), y])))


def toy_forward_backward(model: ToyModel, x, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the minibatch and its gradient in flat-layout order."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ValueError("minibatch is empty")
    batch = x.shape[0]
    patches = _patches(x)
    a, p = _forward(model, x, patches)
    loss = float(-np.mean(np.log(p[np.arange(batch), y])))
    dlogits = p.copy()
    dlogits[np.arange(batch), y] -= 1.0
    dlogits /= batch
    flat_a = a.reshape(batch, -1)
    d_dense_w = flat_a.T @ dlogits
    d_dense_b = dlogits.sum(axis=0)
    dz = (dlogits @ model.dense_w.T).reshape(a.shape) * (1.0 - a * a)
    d_conv_b = dz.sum(axis=(0, 1, 2))
    d_conv_w = (patches.reshape(-1, patches.shape[-1]).T @ dz.reshape(-1, CONV.filters)).reshape(CONV.shape)
    grad = np.concatenate([d_conv_w.reshape(-1), d_conv_b, d_dense_w.reshape(-1), d_dense_b])
    return loss, grad


def apply_update(model: ToyModel, grad, lr: float | None = None) -> ToyModel:
    lr = model.lr if lr is None else lr
    grad = np.asarray(grad, dtype=np.float64)
    return model.with_vector(model.vector() - lr * grad)
