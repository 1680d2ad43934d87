"""Network layers with hand-written forward and backward passes.

All image tensors use NCHW layout. Every ``*_backward`` returns exact
gradients of a scalar objective given the upstream gradient of the layer
output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import Tensor, xavier_init


@dataclass
class LayerParams:
    weights: Tensor
    bias: Tensor | None = None


# --------------------------------------------------------------------------
# fully connected


def fc_forward(x: Tensor, p: LayerParams) -> Tensor:
    """y = x @ W + b with W of shape (D_in, D_out)."""
    if x.ndim != 2 or p.weights.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise ValueError(f"fc shape mismatch: input {x.shape}, weights {p.weights.shape}")
    y = x @ p.weights
    if p.bias is not None:
        if p.bias.shape != (p.weights.shape[1],):
            raise ValueError(f"fc bias shape {p.bias.shape}, expected ({p.weights.shape[1]},)")
        y = y + p.bias
    return y


def fc_backward(x: Tensor, p: LayerParams, upstream: Tensor):
    """Return (d_x, d_weights, d_bias); d_bias is None for bias-free layers."""
    if upstream.shape != (x.shape[0], p.weights.shape[1]):
        raise ValueError(f"fc upstream shape {upstream.shape}, expected {(x.shape[0], p.weights.shape[1])}")
    d_x = upstream @ p.weights.T
    d_w = x.T @ upstream
    d_b = upstream.sum(axis=0) if p.bias is not None else None
    return d_x, d_w, d_b


# --------------------------------------------------------------------------
# convolution (stride 1, square kernels, zero padding)


@dataclass
class ConvCache:
    cols: Tensor
    input_shape: tuple
    out_hw: tuple
    padding: int


def conv2d_forward(x: Tensor, p: LayerParams, padding: int = 0):
    """Cross-correlation of ``x`` (N,C,H,W) with kernels (F,C,k,k) plus bias.

    Returns the output (N,F,H',W') and a cache for :func:`conv2d_backward`.
    """
    if x.ndim != 4 or p.weights.ndim != 4:
        raise ValueError(f"conv expects 4-D input and kernels, got {x.shape}, {p.weights.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = p.weights.shape
    if kc != c:
        raise ValueError(f"kernel channels {kc} != input channels {c}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = hp - kh + 1, wp - kw + 1
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    kernel = p.weights.reshape(f, -1)
    out = cols @ kernel.T
    if p.bias is not None:
        out += p.bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    return out, ConvCache(cols, (n, c, h, w), (ho, wo), padding)


def conv2d_backward(upstream: Tensor, p: LayerParams, cache: ConvCache, need_input: bool = True):
    """Return (d_x, d_weights, d_bias); d_x is None when ``need_input`` is False."""
    n, c, h, w = cache.input_shape
    ho, wo = cache.out_hw
    f, _, kh, kw = p.weights.shape
    if upstream.shape != (n, f, ho, wo):
        raise ValueError(f"conv upstream shape {upstream.shape}, expected {(n, f, ho, wo)}")
    g = upstream.transpose(0, 2, 3, 1).reshape(-1, f)
    kernel = p.weights.reshape(f, -1)
    d_w = (g.T @ cache.cols).reshape(p.weights.shape)
    d_b = g.sum(axis=0) if p.bias is not None else None
    if not need_input:
        return None, d_w, d_b
    # kh, kw leading so each scatter below reads a contiguous block
    d_cols = np.ascontiguousarray((g @ kernel).reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    pad = cache.padding
    d_xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            d_xp[:, :, i:i + ho, j:j + wo] += d_cols[i, j]
    d_x = d_xp[:, :, pad:pad + h, pad:pad + w] if pad else d_xp
    return np.ascontiguousarray(d_x), d_w, d_b


# --------------------------------------------------------------------------
# 2x2 max pooling, stride 2


def maxpool_forward(x: Tensor):
    """Return pooled output and the in-window argmax (0..3, row-major).

    Ties resolve to the first row-major position of the window.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool needs even spatial extents, got {h}x{w}")
    v = x.reshape(n, c, h // 2, 2, w // 2, 2)
    # window candidates in row-major order; strict > keeps the first on ties
    cands = (v[:, :, :, 0, :, 0], v[:, :, :, 0, :, 1], v[:, :, :, 1, :, 0], v[:, :, :, 1, :, 1])
    out = cands[0].copy()
    argmax = np.zeros(out.shape, dtype=np.int8)
    for pos in range(1, 4):
        better = cands[pos] > out
        out = np.where(better, cands[pos], out)
        argmax[better] = pos
    return out, argmax


def maxpool_backward(upstream: Tensor, argmax: Tensor) -> Tensor:
    n, c, ho, wo = argmax.shape
    if upstream.shape != argmax.shape:
        raise ValueError(f"maxpool upstream shape {upstream.shape}, expected {argmax.shape}")
    d_x = np.zeros((n, c, ho, 2, wo, 2))
    for pos in range(4):
        d_x[:, :, :, pos // 2, :, pos % 2] = np.where(argmax == pos, upstream, 0.0)
    return d_x.reshape(n, c, 2 * ho, 2 * wo)


# --------------------------------------------------------------------------
# ReLU


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, upstream: Tensor) -> Tensor:
    # subgradient at 0 is 0
    return upstream * (x > 0)


# --------------------------------------------------------------------------
# architectures


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    padding: int = 0


@dataclass(frozen=True)
class Pool:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FC:
    out: int


Layer = Union[Conv, Pool, ReLU, Flatten, FC]


@dataclass(frozen=True)
class Architecture:
    """Layer stack mapping inputs to penultimate features.

    The final classifier (feature_dim -> num_classes, no bias) is not part of
    ``layers``; it lives in :class:`incay.losses.ClassifierState`.
    """

    name: str
    input_shape: tuple
    layers: tuple
    feature_dim: int
    num_classes: int = 10
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        shapes = [tuple(self.input_shape)]
        for layer in self.layers:
            shapes.append(_output_shape(layer, shapes[-1]))
        if shapes[-1] != (self.feature_dim,):
            raise ValueError(f"{self.name}: stack ends in shape {shapes[-1]}, expected ({self.feature_dim},)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        object.__setattr__(self, "shapes", tuple(shapes))


def _output_shape(layer: Layer, shape: tuple) -> tuple:
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ValueError(f"conv needs (C,H,W) input, got {shape}")
        c, h, w = shape
        ho = h + 2 * layer.padding - layer.kernel + 1
        wo = w + 2 * layer.padding - layer.kernel + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"kernel {layer.kernel} larger than padded input {shape}")
        return (layer.filters, ho, wo)
    if isinstance(layer, Pool):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ValueError(f"pool needs even extents, got {shape}")
        return (c, h // 2, w // 2)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, FC):
        if len(shape) != 1:
            raise ValueError(f"fc needs flat input, got {shape}")
        return (layer.out,)
    raise TypeError(f"unknown layer {layer!r}")


def mnist2d(num_classes: int = 10) -> Architecture:
    """Two 5x5 conv layers (20, 50 filters), 2x2 pools, 2-D feature layer."""
    return Architecture(
        name="mnist2d",
        input_shape=(1, 28, 28),
        layers=(Conv(20, 5), ReLU(), Pool(), Conv(50, 5), ReLU(), Pool(), Flatten(), FC(2)),
        feature_dim=2,
        num_classes=num_classes,
    )


def mlp(input_dim: int = 784, hidden: int = 256, feature_dim: int = 64, num_classes: int = 10) -> Architecture:
    """Fast fallback network; not one of the published architectures."""
    return Architecture(
        name="mlp",
        input_shape=(input_dim,),
        layers=(Flatten(), FC(hidden), ReLU(), FC(feature_dim)),
        feature_dim=feature_dim,
        num_classes=num_classes,
    )


ARCHITECTURES = {"mnist2d": mnist2d, "mlp": mlp}


def init_params(arch: Architecture, rng: np.random.Generator) -> list:
    """Xavier-uniform weights and zero biases; None for parameter-free layers."""
    params = []
    for layer, shape in zip(arch.layers, arch.shapes):
        if isinstance(layer, Conv):
            c = shape[0]
            k = layer.kernel
            w = xavier_init(rng, c * k * k, layer.filters * k * k, (layer.filters, c, k, k))
            params.append(LayerParams(w, np.zeros(layer.filters)))
        elif isinstance(layer, FC):
            d_in = shape[0]
            w = xavier_init(rng, d_in, layer.out, (d_in, layer.out))
            params.append(LayerParams(w, np.zeros(layer.out)))
        else:
            params.append(None)
    return params


def _as_input(arch: Architecture, x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    expected = tuple(arch.input_shape)
    if x.shape[1:] == expected:
        return x
    if int(np.prod(x.shape[1:])) == int(np.prod(expected)) and isinstance(arch.layers[0], Flatten):
        return x.reshape((x.shape[0],) + expected)
    raise ValueError(f"{arch.name}: input batch shape {x.shape[1:]} does not match {expected}")


def forward_features(arch: Architecture, params: Sequence, x: Tensor, keep_cache: bool = False):
    """Run the layer stack; returns the N x feature_dim features.

    With ``keep_cache`` also returns the per-layer caches needed by
    :func:`backward_features`.
    """
    h = _as_input(arch, x)
    caches = []
    for layer, p in zip(arch.layers, params):
        if isinstance(layer, Conv):
            out, cache = conv2d_forward(h, p, layer.padding)
        elif isinstance(layer, Pool):
            out, cache = maxpool_forward(h)
        elif isinstance(layer, ReLU):
            out, cache = relu_forward(h), h
        elif isinstance(layer, Flatten):
            out, cache = h.reshape(h.shape[0], -1), h.shape
        elif isinstance(layer, FC):
            out, cache = fc_forward(h, p), h
        else:
            raise TypeError(f"unknown layer {layer!r}")
        if keep_cache:
            caches.append(cache)
        h = out
    return (h, caches) if keep_cache else h


def backward_features(arch: Architecture, params: Sequence, caches: list, d_features: Tensor) -> list:
    """Backpropagate d_features; returns a list of (d_weights, d_bias) or None per layer."""
    grads: list = [None] * len(arch.layers)
    g = d_features
    for idx in range(len(arch.layers) - 1, -1, -1):
        layer, p, cache = arch.layers[idx], params[idx], caches[idx]
        if isinstance(layer, Conv):
            g_in, d_w, d_b = conv2d_backward(g, p, cache, need_input=idx > 0)
            grads[idx] = (d_w, d_b)
            g = g_in
        elif isinstance(layer, Pool):
            g = maxpool_backward(g, cache)
        elif isinstance(layer, ReLU):
            g = relu_backward(cache, g)
        elif isinstance(layer, Flatten):
            g = g.reshape(cache)
        elif isinstance(layer, FC):
            g, d_w, d_b = fc_backward(cache, p, g)
            grads[idx] = (d_w, d_b)
    return grads
