"""Layers with hand-written forward and backward passes.

A :class:`Network` is an ordered list of :class:`Dense`, :class:`Conv2d` and
:class:`MaxPool` layers. Every dense or conv layer except the final classifier
carries a :class:`Gate`, whose binarized values drive the tri-state ReLU

    y = w' * x        if x >= 0
    y = w' * d' * x   otherwise

with one ``w`` per neuron (or per feature map) and one ``d`` per layer.
Gradients through the binarization use the identity straight-through
estimator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .core_math import DimensionError, SeededRng

__all__ = [
    "Gate",
    "Dense",
    "Conv2d",
    "MaxPool",
    "Network",
    "ForwardCache",
    "Gradients",
    "StaleCacheError",
    "binarize",
    "tsrelu_apply",
    "softmax_xent",
    "forward",
    "backward",
    "predict",
    "accuracy",
    "grad_check",
    "loss_and_grads",
    "init_network",
]


class StaleCacheError(RuntimeError):
    """The network changed after the forward pass that produced a cache."""


def binarize(v):
    """1 where ``v >= 0.5`` else 0. Works on scalars and arrays."""
    arr = np.asarray(v, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"gate value outside [0, 1]: {v!r}; were gates clipped?")
    out = (arr >= 0.5).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def tsrelu_apply(x, w_bin, d_bin):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, w_bin * x, w_bin * d_bin * x)
    return float(out) if out.ndim == 0 else out


@dataclass
class Gate:
    w: np.ndarray
    d: float = 0.0
    learn_w: bool = True
    learn_d: bool = False

    def __post_init__(self):
        self.w = np.asarray(self.w)
        if self.w.dtype.kind != "f":
            self.w = self.w.astype(np.float64)
        self.d = float(self.d)

    @property
    def w_bin(self) -> np.ndarray:
        return binarize(self.w)

    @property
    def d_bin(self) -> float:
        return binarize(self.d)

    def copy(self) -> "Gate":
        return Gate(self.w.copy(), self.d, self.learn_w, self.learn_d)


@dataclass
class Dense:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray | None  # None for a bias-free factor layer
    gate: Gate | None = None
    collapsible: bool = False

    @property
    def width(self) -> int:
        return self.weights.shape[0]

    @property
    def kind(self) -> str:
        return "dense"

    def params(self) -> dict[str, np.ndarray]:
        if self.bias is None:
            return {"weights": self.weights}
        return {"weights": self.weights, "bias": self.bias}

    def copy(self) -> "Dense":
        return Dense(self.weights.copy(), None if self.bias is None else self.bias.copy(),
                     self.gate.copy() if self.gate else None, self.collapsible)


@dataclass
class Conv2d:
    """Valid-padding, stride-1 convolution (cross-correlation)."""

    kernels: np.ndarray  # (filters, in_channels, kh, kw)
    bias: np.ndarray
    gate: Gate | None = None
    stride: int = 1
    collapsible: bool = False

    def __post_init__(self):
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")

    @property
    def width(self) -> int:
        return self.kernels.shape[0]

    @property
    def kind(self) -> str:
        return "conv"

    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.kernels, "bias": self.bias}

    def copy(self) -> "Conv2d":
        return Conv2d(self.kernels.copy(), self.bias.copy(),
                      self.gate.copy() if self.gate else None, self.stride, self.collapsible)


@dataclass
class MaxPool:
    window: int = 2

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("pool window must be at least 2")

    @property
    def kind(self) -> str:
        return "pool"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def copy(self) -> "MaxPool":
        return MaxPool(self.window)


_version_counter = itertools.count(1)


@dataclass
class Network:
    input_shape: tuple[int, ...]  # per-sample, e.g. (1, 28, 28) or (784,)
    layers: list = field(default_factory=list)
    # identity STE partner: use the binarized (True) or raw (False) other gate
    ste_binarized_partner: bool = True

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.version = next(_version_counter)
        self.refresh_flags()

    def touch(self) -> None:
        """Mark parameters as modified; outstanding caches become stale."""
        self.version = next(_version_counter)

    def refresh_flags(self) -> None:
        """Recompute per-layer collapsibility from layer order.

        A gated dense layer is collapsible when the next layer is dense.
        Conv layers never are.
        """
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, (Dense, Conv2d)):
                nxt = self.layers[idx + 1] if idx + 1 < len(self.layers) else None
                layer.collapsible = (
                    isinstance(layer, Dense) and layer.gate is not None and isinstance(nxt, Dense)
                )

    @property
    def param_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, (Dense, Conv2d))]

    @property
    def gated_layers(self) -> list:
        return [l for l in self.param_layers if l.gate is not None]

    @property
    def num_classes(self) -> int:
        return self.param_layers[-1].width

    def copy(self) -> "Network":
        return Network(self.input_shape, [l.copy() for l in self.layers], self.ste_binarized_partner)

    def output_shape_of(self, idx: int) -> tuple[int, ...]:
        """Per-sample output shape of layer ``idx`` (-1 for the input)."""
        shape = self.input_shape
        for layer in self.layers[: idx + 1]:
            if isinstance(layer, Dense):
                shape = (layer.width,)
            elif isinstance(layer, Conv2d):
                _, h, w = shape
                kh, kw = layer.kernels.shape[2:]
                shape = (layer.width, h - kh + 1, w - kw + 1)
            else:
                c, h, w = shape
                shape = (c, h // layer.window, w // layer.window)
        return shape


@dataclass
class ForwardCache:
    version: int
    inputs: list
    pre: list
    pool_argmax: list
    conv_cols: list
    gates_used: list  # (w', d') per layer or None
    batch_shape: tuple


@dataclass
class Gradients:
    weights: list  # per layer, None for pool
    bias: list
    w: list  # per layer, None for ungated
    d: list


def _conv_cols(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, c, h, w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    ho, wo = h - kh + 1, w - kw + 1
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def _conv_forward(layer: Conv2d, x: np.ndarray):
    f, c, kh, kw = layer.kernels.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"conv expects (B, {c}, H, W) input, got {x.shape}")
    b, _, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {x.shape} smaller than kernel {(kh, kw)}")
    cols = _conv_cols(x, kh, kw)
    z = cols @ layer.kernels.reshape(f, -1).T + layer.bias
    return z.reshape(b, ho, wo, f).transpose(0, 3, 1, 2), cols


def _conv_backward(layer: Conv2d, dz: np.ndarray, cols: np.ndarray, x_shape):
    f, c, kh, kw = layer.kernels.shape
    b, _, h, w = x_shape
    ho, wo = h - kh + 1, w - kw + 1
    dzf = dz.transpose(0, 2, 3, 1).reshape(-1, f)
    dk = (dzf.T @ cols).reshape(layer.kernels.shape)
    db = dzf.sum(axis=0)
    dcols = (dzf @ layer.kernels.reshape(f, -1)).reshape(b, ho, wo, c, kh, kw)
    dx = np.zeros(x_shape, dtype=dz.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dk, db


def _pool_forward(layer: MaxPool, x: np.ndarray):
    if x.ndim != 4:
        raise DimensionError(f"pool expects (B, C, H, W) input, got {x.shape}")
    k = layer.window
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    blocks = x[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    # argmax returns the first maximum in scan order, which fixes tie-breaking
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(layer: MaxPool, dy: np.ndarray, idx: np.ndarray, x_shape):
    k = layer.window
    b, c, h, w = x_shape
    ho, wo = h // k, w // k
    blocks = np.zeros((b, c, ho, wo, k * k), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, : ho * k, : wo * k] = blocks.reshape(b, c, ho * k, wo * k)
    return dx


def _gate_view(gate_vec: np.ndarray, ndim: int) -> np.ndarray:
    # broadcast a per-channel vector against (B, C) or (B, C, H, W)
    return gate_vec.reshape((1, -1) + (1,) * (ndim - 2))


def forward(net: Network, batch: np.ndarray):
    """Logits for ``batch`` plus the cache needed by :func:`backward`."""
    x = np.asarray(batch)
    if x.shape[1:] != net.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input {net.input_shape}")
    cache = ForwardCache(net.version, [], [], [], [], [], x.shape)
    for layer in net.layers:
        cache.inputs.append(x)
        if isinstance(layer, MaxPool):
            x, idx = _pool_forward(layer, x)
            cache.pre.append(None)
            cache.pool_argmax.append(idx)
            cache.conv_cols.append(None)
            cache.gates_used.append(None)
            continue
        if isinstance(layer, Dense):
            if x.ndim > 2:
                x = x.reshape(x.shape[0], -1)
                cache.inputs[-1] = x
            if x.shape[1] != layer.weights.shape[1]:
                raise DimensionError(f"dense expects {layer.weights.shape[1]} inputs, got {x.shape}")
            z = x @ layer.weights.T
            if layer.bias is not None:
                z = z + layer.bias
            cache.conv_cols.append(None)
        else:
            z, cols = _conv_forward(layer, x)
            cache.conv_cols.append(cols)
        cache.pool_argmax.append(None)
        cache.pre.append(z)
        if layer.gate is None:
            cache.gates_used.append(None)
            x = z
        else:
            wb, db = layer.gate.w_bin, layer.gate.d_bin
            cache.gates_used.append((wb, db))
            x = np.where(z >= 0, z, db * z) * _gate_view(wb, z.ndim).astype(z.dtype)
    return x, cache


def predict(net: Network, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    out = [forward(net, images[i:i + batch_size])[0] for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.num_classes))


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 1000) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(net, images, batch_size).argmax(axis=1) == labels))


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(lse - shifted[rows, labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / b


def backward(net: Network, cache: ForwardCache, dlogits: np.ndarray) -> Gradients:
    """Back-propagate ``dlogits`` (gradient of the loss w.r.t. the logits).

    Gate gradients follow the identity straight-through estimator: with
    pre-activation ``z`` and upstream gradient ``g``,
    ``dL/dw_j = sum(g * (z if z >= 0 else d*z))`` over batch and spatial
    positions, and ``dL/dd = sum(g * w_j * z)`` over entries with ``z < 0``.
    ``d`` and ``w`` inside those products are the binarized values unless the
    network was configured with ``ste_binarized_partner=False``.
    """
    if cache.version != net.version:
        raise StaleCacheError("network parameters changed since the forward pass")
    n = len(net.layers)
    grads = Gradients([None] * n, [None] * n, [None] * n, [None] * n)
    g = np.asarray(dlogits)
    for idx in range(n - 1, -1, -1):
        layer = net.layers[idx]
        x = cache.inputs[idx]
        if isinstance(layer, MaxPool):
            g = _pool_backward(layer, g, cache.pool_argmax[idx], x.shape)
            continue
        z = cache.pre[idx]
        if layer.gate is not None:
            wb, db = cache.gates_used[idx]
            if net.ste_binarized_partner:
                w_use, d_use = wb, db
            else:
                w_use, d_use = layer.gate.w, layer.gate.d
            neg = z < 0
            axes = (0,) + tuple(range(2, z.ndim))
            grads.w[idx] = np.sum(g * np.where(neg, d_use * z, z), axis=axes)
            grads.d[idx] = float(np.sum(np.sum(g * np.where(neg, z, 0.0), axis=axes) * w_use))
            g = g * np.where(neg, db, 1.0) * _gate_view(wb, z.ndim).astype(z.dtype)
        if isinstance(layer, Dense):
            grads.weights[idx] = g.T @ x
            grads.bias[idx] = None if layer.bias is None else g.sum(axis=0)
            if idx > 0:
                g = (g @ layer.weights).reshape((len(g),) + net.output_shape_of(idx - 1))
        else:
            g, grads.weights[idx], grads.bias[idx] = _conv_backward(
                layer, g, cache.conv_cols[idx], x.shape)
    return grads


def loss_and_grads(net: Network, batch: np.ndarray, labels: np.ndarray):
    logits, cache = forward(net, batch)
    loss, dlogits = softmax_xent(logits, labels)
    return loss, backward(net, cache, dlogits), logits


def grad_check(net: Network, batch: np.ndarray, labels: np.ndarray, tol: float = 1e-4,
               h: float = 1e-5, floor: float = 1e-6) -> dict:
    """Compare analytic weight/bias gradients with central differences.

    Gate parameters are not perturbed (the forward pass only sees their
    binarized values). Relative error per entry is
    ``|a - n| / max(|a|, |n|, floor)``; the report maps
    ``"layer{i}.weights"`` style keys to the worst entry and flags groups
    above ``tol`` under ``"failed"``.
    """
    _, grads, _ = loss_and_grads(net, batch, labels)
    report: dict = {"groups": {}, "failed": []}

    def loss_at() -> float:
        net.touch()
        return softmax_xent(forward(net, batch)[0], labels)[0]

    for idx, layer in enumerate(net.layers):
        for name, arr in layer.params().items():
            analytic = (grads.weights if name == "weights" else grads.bias)[idx]
            numeric = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), numeric.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = loss_at()
                flat[k] = orig - h
                down = loss_at()
                flat[k] = orig
                nflat[k] = (up - down) / (2 * h)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            err = float(np.max(np.abs(analytic - numeric) / denom)) if arr.size else 0.0
            key = f"layer{idx}.{name}"
            report["groups"][key] = err
            if err > tol:
                report["failed"].append(key)
    net.touch()
    report["max_rel_error"] = max(report["groups"].values(), default=0.0)
    return report


def init_network(input_shape, layers: list, rng: SeededRng, w0: float = 1.0, d0: float = 0.5,
                 learn_w: bool = True, learn_d: bool = True, dtype=np.float64,
                 gain: float = 1.0) -> Network:
    """Build a network from a list of layer specs with fan-in scaled uniform weights.

    Specs are tuples ``("conv", filters, kh, kw)``, ``("pool", k)``,
    ``("fc", n)`` and a final ``("out", classes)``. Weights are drawn from
    U(-gain/sqrt(fan_in), gain/sqrt(fan_in)); biases start at zero.
    ``gain = sqrt(6)`` keeps the activation variance of a ReLU stack
    constant with depth. ``d`` starts at
    ``d0`` on collapsible layers that learn depth and is pinned to 0
    elsewhere.
    """
    net = Network(tuple(input_shape), [])
    shape = tuple(input_shape)
    for spec in layers:
        kind = spec[0]
        if kind == "pool":
            layer = MaxPool(int(spec[1]))
            c, h, w = shape
            shape = (c, h // layer.window, w // layer.window)
        elif kind == "conv":
            if len(shape) != 3:
                raise DimensionError("conv layer needs a (C, H, W) input")
            f, kh, kw = (int(s) for s in spec[1:4])
            fan_in = shape[0] * kh * kw
            bound = gain / np.sqrt(fan_in)
            k = (rng.uniform(f * fan_in) * 2 - 1) * bound
            layer = Conv2d(k.reshape(f, shape[0], kh, kw).astype(dtype), np.zeros(f, dtype=dtype))
            layer.gate = Gate(np.full(f, w0), 0.0, learn_w, False)
            shape = (f, shape[1] - kh + 1, shape[2] - kw + 1)
        elif kind in ("fc", "out"):
            n = int(spec[1])
            fan_in = int(np.prod(shape))
            bound = gain / np.sqrt(fan_in)
            wts = ((rng.uniform(n * fan_in) * 2 - 1) * bound).reshape(n, fan_in)
            layer = Dense(wts.astype(dtype), np.zeros(n, dtype=dtype))
            if kind == "fc":
                layer.gate = Gate(np.full(n, w0), 0.0, learn_w, learn_d)
            shape = (n,)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        net.layers.append(layer)
    if not net.layers or not isinstance(net.layers[-1], Dense) or net.layers[-1].gate is not None:
        raise ValueError("network must end with an ungated output layer")
    net.refresh_flags()
    for layer in net.gated_layers:
        if layer.collapsible and layer.gate.learn_d:
            layer.gate.d = float(d0)
        else:
            layer.gate.learn_d = False
            layer.gate.d = 0.0
    return net
