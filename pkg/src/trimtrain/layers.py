"""Layer kernels with explicit forward/backward passes.

Every forward returns ``(output, cache)``; caches hold only batch-leading
arrays so a trainer can slice them down to a subset of instances.
Convolution backward passes accept an optional kept-channel mask: only the
listed output channels of the error map take part in error propagation and
weight-gradient computation.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .flops import LayerDims
from .tensor_core import DTYPE, Rng


class ShapeError(ValueError):
    def __init__(self, layer: str, msg: str):
        super().__init__(f"[{layer}] {msg}")
        self.layer = layer


class EmptyMaskError(ValueError):
    pass


@dataclass
class LayerCache:
    """Saved forward state. All array fields are indexed by instance first."""

    x: np.ndarray

    def take(self, rows) -> "LayerCache":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v[rows] if isinstance(v, np.ndarray) else v
        return type(self)(**kw)


@dataclass
class PoolCache(LayerCache):
    argmax: np.ndarray


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _normalize_mask(mask, n: int, layer: str) -> Optional[np.ndarray]:
    """None means every channel. Returns sorted unique indices otherwise."""
    if mask is None:
        return None
    idx = np.unique(np.asarray(mask, dtype=np.int64))
    if idx.size == 0:
        raise EmptyMaskError(f"[{layer}] at least one error-map channel must be kept")
    if idx[0] < 0 or idx[-1] >= n:
        raise ShapeError(layer, f"mask indices must lie in [0, {n})")
    if idx.size == n:
        return None
    return idx


# --------------------------------------------------------------------------
# convolution


class Conv2d:
    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size,
                 stride: int = 1, padding: int = 0, *, name: str = "conv",
                 rng: Optional[Rng] = None):
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else kernel_size
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.name = name
        self.stride = int(stride)
        self.padding = int(padding)
        fan_in = in_channels * kh * kw
        if rng is None:
            self.weight = np.zeros((out_channels, in_channels, kh, kw), dtype=DTYPE)
        else:
            # He-normal keeps ReLU activations at unit scale.
            self.weight = rng.normal((out_channels, in_channels, kh, kw), 0.0,
                                     np.sqrt(2.0 / fan_in))
        self.bias = np.zeros(out_channels, dtype=DTYPE)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, in_shape: Sequence[int]) -> tuple[int, int, int]:
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(self.name, f"expected {self.in_channels} input channels, got {c}")
        kh, kw = self.kernel
        ho = _out_size(h, kh, self.stride, self.padding)
        wo = _out_size(w, kw, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(self.name, f"input {h}x{w} too small for kernel {kh}x{kw}")
        return self.out_channels, ho, wo

    def dims(self, in_shape, first: bool = False) -> LayerDims:
        n, h, w = self.output_shape(in_shape)
        kh, kw = self.kernel
        return LayerDims(self.name, "conv", c=self.in_channels, n=n, k_h=kh, k_w=kw,
                         h_in=in_shape[1], w_in=in_shape[2], h=h, w=w, first=first)

    def _windows(self, x: np.ndarray) -> np.ndarray:
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        kh, kw = self.kernel
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        return win[:, :, ::s, ::s]  # (m, c, Ho, Wo, kh, kw)

    def forward(self, x: np.ndarray):
        return conv_forward(self, x)

    def backward(self, cache, delta, mask=None, need_input_grad=True):
        gw, gb = conv_backward_weights(self, cache, delta, mask)
        dx = None
        if need_input_grad:
            dx = conv_backward_error(self, delta, mask, input_hw=cache.x.shape[2:])
        return dx, {"weight": gw, "bias": gb}


def conv_forward(layer: Conv2d, a_prev: np.ndarray):
    if a_prev.ndim != 4:
        raise ShapeError(layer.name, f"expected a 4-d input, got shape {a_prev.shape}")
    layer.output_shape(a_prev.shape[1:])
    win = layer._windows(a_prev)
    out = np.tensordot(win, layer.weight, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + layer.bias[None, :, None, None]
    return np.ascontiguousarray(out), LayerCache(a_prev)


def _check_delta(layer: Conv2d, delta: np.ndarray, input_hw=None):
    if delta.ndim != 4 or delta.shape[1] != layer.out_channels:
        raise ShapeError(layer.name, f"error map shape {delta.shape} does not match "
                         f"{layer.out_channels} output channels")
    if input_hw is not None:
        _, ho, wo = layer.output_shape((layer.in_channels, *input_hw))
        if delta.shape[2:] != (ho, wo):
            raise ShapeError(layer.name, f"error map spatial dims {delta.shape[2:]} "
                             f"!= forward output {(ho, wo)}")


def conv_backward_error(layer: Conv2d, delta_out: np.ndarray, mask=None, input_hw=None):
    """Input-side error map, summing only over the kept output channels.

    The kernel rotation is carried by the scatter indices below; rotated
    weights are never materialised.
    """
    _check_delta(layer, delta_out, input_hw)
    keep = _normalize_mask(mask, layer.out_channels, layer.name)
    kh, kw = layer.kernel
    s, p = layer.stride, layer.padding
    m, _, ho, wo = delta_out.shape
    if input_hw is None:
        input_hw = ((ho - 1) * s + kh - 2 * p, (wo - 1) * s + kw - 2 * p)
    h_in, w_in = input_hw

    if keep is None:
        d, w = delta_out, layer.weight
    else:
        d, w = delta_out[:, keep], layer.weight[keep]
    # cols[b, ci, i, j, y, x] = sum over kept k of d[b, k, y, x] * W[k, ci, i, j]
    cols = np.tensordot(d, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((m, layer.in_channels, h_in + 2 * p, w_in + 2 * p), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, i, j]
    return dxp[:, :, p:p + h_in, p:p + w_in].copy() if p else dxp


def conv_backward_weights(layer: Conv2d, cache: LayerCache, delta_out: np.ndarray, mask=None):
    """Weight and bias gradients; rows of kernels outside the mask stay zero."""
    _check_delta(layer, delta_out, cache.x.shape[2:])
    keep = _normalize_mask(mask, layer.out_channels, layer.name)
    win = layer._windows(cache.x)
    if keep is None:
        gw = np.tensordot(delta_out, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = delta_out.sum(axis=(0, 2, 3))
        return gw, gb
    gw = np.zeros_like(layer.weight)
    gb = np.zeros_like(layer.bias)
    d = delta_out[:, keep]
    gw[keep] = np.tensordot(d, win, axes=([0, 2, 3], [0, 2, 3]))
    gb[keep] = d.sum(axis=(0, 2, 3))
    return gw, gb


# --------------------------------------------------------------------------
# fully connected


class Linear:
    kind = "fc"

    def __init__(self, in_features: int, out_features: int, *, name: str = "fc",
                 rng: Optional[Rng] = None, gain: float = 2.0):
        self.name = name
        if rng is None:
            self.weight = np.zeros((out_features, in_features), dtype=DTYPE)
        else:
            self.weight = rng.normal((out_features, in_features), 0.0,
                                     np.sqrt(gain / in_features))
        self.bias = np.zeros(out_features, dtype=DTYPE)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[1],):
            raise ShapeError(self.name, f"expected ({self.weight.shape[1]},) input, got {tuple(in_shape)}")
        return (self.weight.shape[0],)

    def dims(self, in_shape, first: bool = False) -> LayerDims:
        n_out = self.output_shape(in_shape)[0]
        return LayerDims(self.name, "fc", c=self.weight.shape[1], n=n_out, first=first)

    def forward(self, x):
        return fc_forward(self, x)

    def backward(self, cache, delta, mask=None, need_input_grad=True):
        dx, gw, gb = fc_backward(self, cache, delta, need_input_grad)
        return dx, {"weight": gw, "bias": gb}


def fc_forward(layer: Linear, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
        raise ShapeError(layer.name, f"input shape {x.shape} incompatible with weight {layer.weight.shape}")
    return x @ layer.weight.T + layer.bias, LayerCache(x)


def fc_backward(layer: Linear, cache: LayerCache, delta: np.ndarray, need_input_grad=True):
    if delta.shape != (cache.x.shape[0], layer.weight.shape[0]):
        raise ShapeError(layer.name, f"error map shape {delta.shape} mismatch")
    gw = delta.T @ cache.x
    gb = delta.sum(axis=0)
    dx = delta @ layer.weight if need_input_grad else None
    return dx, gw, gb


# --------------------------------------------------------------------------
# parameter-free layers


class ReLU:
    kind = "relu"

    def __init__(self, *, name: str = "relu"):
        self.name = name

    def params(self):
        return {}

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def dims(self, in_shape, first: bool = False) -> LayerDims:
        return LayerDims(self.name, self.kind, first=first)

    def forward(self, x):
        return relu_forward(x)

    def backward(self, cache, delta, mask=None, need_input_grad=True):
        return relu_backward(cache, delta), {}


def relu_forward(x):
    return np.maximum(x, 0.0), LayerCache(x)


def relu_backward(cache: LayerCache, delta):
    return np.where(cache.x > 0, delta, 0.0)


class MaxPool2d:
    kind = "pool"

    def __init__(self, size: int = 2, stride: Optional[int] = None, *, name: str = "pool"):
        self.name = name
        self.size = int(size)
        self.stride = int(stride or size)

    def params(self):
        return {}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        ho = _out_size(h, self.size, self.stride, 0)
        wo = _out_size(w, self.size, self.stride, 0)
        if ho < 1 or wo < 1:
            raise ShapeError(self.name, f"input {h}x{w} smaller than pool window")
        return c, ho, wo

    def dims(self, in_shape, first: bool = False) -> LayerDims:
        return LayerDims(self.name, self.kind, first=first)

    def forward(self, x):
        return maxpool_forward(self, x)

    def backward(self, cache, delta, mask=None, need_input_grad=True):
        return maxpool_backward(self, cache, delta), {}


def maxpool_forward(layer: MaxPool2d, x):
    k, s = layer.size, layer.stride
    m, c, _, _ = x.shape
    _, ho, wo = layer.output_shape(x.shape[1:])
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    flat = win.reshape(m, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, PoolCache(x, arg.astype(np.int8 if k * k < 128 else np.int64))


def maxpool_backward(layer: MaxPool2d, cache: PoolCache, delta):
    k, s = layer.size, layer.stride
    m, c, ho, wo = delta.shape
    dx = np.zeros_like(cache.x)
    for i in range(k):
        for j in range(k):
            hit = cache.argmax == i * k + j
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(hit, delta, 0.0)
    return dx


class Flatten:
    kind = "flatten"

    def __init__(self, *, name: str = "flatten"):
        self.name = name

    def params(self):
        return {}

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def dims(self, in_shape, first: bool = False) -> LayerDims:
        return LayerDims(self.name, self.kind, first=first)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), LayerCache(x)

    def backward(self, cache, delta, mask=None, need_input_grad=True):
        return delta.reshape(cache.x.shape), {}


# --------------------------------------------------------------------------
# loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    zmax = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - zmax)
    return logits - zmax - np.log(e.sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    zmax = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - zmax)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels, weights=None):
    """Per-instance cross-entropy and the error map w.r.t. the logits.

    Without ``weights`` the error map carries the 1/m factor of a mean
    reduction. With ``weights`` it is the gradient of ``sum_i w_i * loss_i``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    m, k = logits.shape
    if labels.shape != (m,):
        raise ShapeError("loss", f"expected {m} labels, got shape {labels.shape}")
    if m and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    rows = np.arange(m)
    top = logits.argmax(axis=1)
    zmax = logits[rows, top]
    e = np.exp(logits - zmax[:, None])
    total = e.sum(axis=1)
    e_rest = e.copy()
    e_rest[rows, top] = 0.0
    # log1p keeps tiny losses exact when the true class dominates
    losses = zmax - logits[rows, labels] + np.log1p(e_rest.sum(axis=1))
    probs = e / total[:, None]
    delta = probs.copy()
    delta[rows, labels] -= 1.0
    if weights is None:
        delta /= max(m, 1)
    else:
        delta *= np.asarray(weights, dtype=DTYPE)[:, None]
    return losses, delta, probs
