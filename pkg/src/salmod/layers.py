"""Differentiable layers over :class:`~salmod.tensor.Node` values.

Spatial ops take ``[N, C, H, W]`` batches; a bare ``[C, H, W]`` input is
treated as a batch of one and returned without the batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Node, TensorError


class LayerError(ValueError):
    pass


def _as_batch(x: Node) -> tuple[Node, bool]:
    if x.value.ndim == 3:
        c, h, w = x.shape
        return Node(x.value.reshape(1, c, h, w), (x,), lambda g: (g.reshape(c, h, w),)), True
    if x.value.ndim != 4:
        raise LayerError(f"expected [C,H,W] or [N,C,H,W], got {list(x.shape)}")
    return x, False


def _unbatch(out: Node, squeeze: bool) -> Node:
    if not squeeze:
        return out
    shape = out.shape
    return Node(out.value[0], (out,), lambda g: (g.reshape(shape),))


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return (
            conv_output_size(h, kh, self.stride, self.padding),
            conv_output_size(w, kw, self.stride, self.padding),
        )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)


def conv2d(x: Node, weight: Node, bias: Node, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation with bias, ``weight`` shaped ``[out, in, kh, kw]``."""
    x, squeeze = _as_batch(x)
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise LayerError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias.shape != (o,):
        raise LayerError(f"conv2d: bias shape {list(bias.shape)} != [{o}]")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise LayerError(f"conv2d: output size {ho}x{wo} < 1 for input {h}x{w}")

    xv = x.value
    if padding:
        xv = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xv.shape[2], xv.shape[3]
    win = sliding_window_view(xv, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wm = weight.value.reshape(o, -1)
    out = (cols @ wm.T + bias.value).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def _backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        db = gm.sum(axis=0) if bias.requires_grad else None
        if not x.requires_grad:
            return None, dw, db
        dcols = np.ascontiguousarray((gm @ wm).reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
        if padding:
            dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
        return dxp, dw, db

    return _unbatch(Node(np.ascontiguousarray(out), (x, weight, bias), _backward), squeeze)


def maxpool2d(x: Node, window: int = 2, stride: int | None = None) -> Node:
    """Max over windows; the gradient goes to the first maximal element."""
    stride = window if stride is None else stride
    x, squeeze = _as_batch(x)
    n, c, h, w = x.shape
    if window > h or window > w:
        raise LayerError(f"maxpool2d: window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.value, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    index = (base + rows * w + cols).ravel()

    def _backward(g):
        dx = np.bincount(index, weights=g.ravel(), minlength=n * c * h * w)
        return (dx.reshape(n, c, h, w).astype(g.dtype, copy=False),)

    return _unbatch(Node(np.ascontiguousarray(out), (x,), _backward), squeeze)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0.0).astype(x.value.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Node) -> Node:
    y = expit(x.value)
    return Node(y, (x,), lambda g: (g * y * (1.0 - y),))


def fully_connected(x: Node, weight: Node, bias: Node) -> Node:
    """``x @ weight.T + bias`` with ``x`` [N, in] and ``weight`` [out, in]."""
    if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise LayerError(f"fully_connected: {list(x.shape)} incompatible with weight {list(weight.shape)}")
    if bias.shape != (weight.shape[0],):
        raise LayerError(f"fully_connected: bias shape {list(bias.shape)} != [{weight.shape[0]}]")
    xv, wv = x.value, weight.value

    def _backward(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return Node(xv @ wv.T + bias.value, (x, weight, bias), _backward)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean cross-entropy over the batch; returns a ``[1]`` node."""
    z = logits.value
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if labels.shape != (n,):
        raise LayerError(f"softmax_cross_entropy: {labels.size} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise LayerError(f"softmax_cross_entropy: label out of range [0, {k})")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def _backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        d *= g[0] / n
        return (d[0] if squeeze else d,)

    return Node(np.array([loss], dtype=z.dtype), (logits,), _backward)


def modulate(features: Node, modulation: Node, skip: bool = True) -> Node:
    """Gate every feature channel by one spatial modulation map.

    ``out = features * (mod + 1)`` with the skip connection, ``features * mod``
    without. The same factor scales the gradient flowing back into
    ``features``; the gradient into ``mod`` is summed over channels.
    """
    features, squeeze = _as_batch(features)
    modulation, _ = _as_batch(modulation)
    n, c, h, w = features.shape
    if modulation.shape != (n, 1, h, w):
        raise LayerError(
            f"modulate: modulation shape {list(modulation.shape)} does not match features {list(features.shape)}"
        )
    m = modulation.value
    if __debug__ and (m.min() < 0.0 or m.max() > 1.0):
        raise LayerError(f"modulate: modulation outside [0,1] (min {m.min()}, max {m.max()})")
    factor = m + 1.0 if skip else m
    fv = features.value

    def _backward(g):
        return g * factor, (g * fv).sum(axis=1, keepdims=True)

    return _unbatch(Node(fv * factor, (features, modulation), _backward), squeeze)


def concat_channels(a: Node, b: Node) -> Node:
    if a.value.ndim != 4 or b.value.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise LayerError(f"concat_channels: {list(a.shape)} and {list(b.shape)} are incompatible")
    ca = a.shape[1]
    return Node(
        np.concatenate([a.value, b.value], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def flatten(x: Node) -> Node:
    shape = x.shape
    return Node(x.value.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


__all__ = [
    "ConvSpec",
    "LayerError",
    "TensorError",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "flatten",
    "fully_connected",
    "maxpool2d",
    "modulate",
    "relu",
    "sigmoid",
    "softmax_cross_entropy",
]
