"""Turning a gated network into a smaller plain one.

Width pruning drops every neuron or feature map whose binarized gate is 0,
together with the matching inputs of the next parameterized layer. Depth
collapse merges a linear dense layer (``d' = 1``) into the dense layer that
follows it. Both preserve the logits of the gated network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core_math import DimensionError, SeededRng, matmul, svd_truncate
from .layers import Conv2d, Dense, MaxPool, Network, accuracy, forward

__all__ = [
    "SurgeryError",
    "PlanError",
    "SurgeryPlan",
    "ArchReport",
    "prune_widths",
    "collapse_depth",
    "eligible_collapses",
    "param_count",
    "compress_svd",
    "equivalence_check",
    "architecture_of",
    "run_surgery",
]


class SurgeryError(RuntimeError):
    """A structural change cannot be applied (e.g. a layer lost every unit)."""


class PlanError(ValueError):
    """A surgery plan names a layer that cannot be collapsed."""


@dataclass
class SurgeryPlan:
    prune: bool = True
    collapse_layers: list[int] = field(default_factory=list)  # indices into net.layers


@dataclass
class ArchReport:
    phi_before: list[int]
    phi_after: list[int]
    params_before: int
    params_after: int
    collapsed_layers: list[int]
    acc_before: float | None = None
    acc_after: float | None = None
    # per gated layer of the trained net: (layer index, h_i, d'_i)
    gates: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "phi_before": self.phi_before,
            "phi_after": self.phi_after,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "collapsed_layers": self.collapsed_layers,
            "acc_before": self.acc_before,
            "acc_after": self.acc_after,
            "gates": [{"layer": i, "h": h, "d_bin": d} for i, h, d in self.gates],
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)


def architecture_of(net: Network) -> list[int]:
    return [layer.width for layer in net.param_layers]


def param_count(net: Network) -> int:
    return int(sum(p.size for layer in net.layers for p in layer.params().values()))


def _next_param_layer(net: Network, idx: int):
    for j in range(idx + 1, len(net.layers)):
        if isinstance(net.layers[j], (Dense, Conv2d)):
            return j
    return None


def prune_widths(net: Network) -> Network:
    """Copy of ``net`` without the units whose binarized width gate is 0."""
    out = net.copy()
    for idx, layer in enumerate(out.layers):
        if not isinstance(layer, (Dense, Conv2d)) or layer.gate is None:
            continue
        keep = layer.gate.w_bin.astype(bool)
        if not keep.any():
            raise SurgeryError(f"layer {idx}: every gate is zero (layer annihilated)")
        if keep.all():
            continue
        if isinstance(layer, Dense):
            layer.weights = layer.weights[keep].copy()
        else:
            layer.kernels = layer.kernels[keep].copy()
        if layer.bias is not None:
            layer.bias = layer.bias[keep].copy()
        layer.gate.w = layer.gate.w[keep].copy()

        nxt_idx = _next_param_layer(out, idx)
        nxt = out.layers[nxt_idx]
        if isinstance(nxt, Conv2d):
            nxt.kernels = nxt.kernels[:, keep].copy()
        elif isinstance(layer, Conv2d):
            # flattened (C, H, W) input: drop every position of a removed map
            c, h, w = out.output_shape_of(nxt_idx - 1)
            cols = np.repeat(keep, h * w)
            nxt.weights = nxt.weights[:, cols].copy()
        else:
            nxt.weights = nxt.weights[:, keep].copy()
    out.refresh_flags()
    return out


def eligible_collapses(net: Network) -> list[int]:
    """Indices of dense layers that are linear (``d' = 1``) and can be merged."""
    return [i for i, l in enumerate(net.layers)
            if isinstance(l, Dense) and l.gate is not None and l.collapsible and l.gate.d_bin == 1.0]


def collapse_depth(net: Network, plan: SurgeryPlan) -> Network:
    """Merge each planned layer ``i`` into layer ``i + 1``.

    The merged layer computes ``W2 @ diag(w') @ W1`` with bias
    ``W2 @ diag(w') @ b1 + b2`` and keeps the second layer's gate. Plans are
    applied from the highest index down so earlier indices stay valid.
    """
    out = net.copy()
    for idx in sorted(set(plan.collapse_layers), reverse=True):
        if not 0 <= idx < len(out.layers) - 1:
            raise PlanError(f"layer {idx} does not exist or has no successor")
        first, second = out.layers[idx], out.layers[idx + 1]
        if not isinstance(first, Dense) or not isinstance(second, Dense):
            raise PlanError(f"layer {idx}: only dense-dense pairs can be collapsed")
        if first.gate is None or not first.collapsible:
            raise PlanError(f"layer {idx} is not collapsible")
        if first.gate.d_bin != 1.0:
            raise PlanError(f"layer {idx} is non-linear (d' = 0)")
        scaled = second.weights.astype(np.float64) * first.gate.w_bin[None, :]
        weights = matmul(scaled, first.weights.astype(np.float64))
        bias = np.zeros(second.width) if second.bias is None else second.bias.astype(np.float64)
        if first.bias is not None:
            bias = bias + matmul(scaled, first.bias.astype(np.float64)[:, None])[:, 0]
        dtype = second.weights.dtype
        merged = Dense(weights.astype(dtype), bias.astype(dtype), second.gate)
        out.layers[idx:idx + 2] = [merged]
        out.refresh_flags()
    return out


def compress_svd(net: Network, layer_index: int, rank: int) -> Network:
    """Replace dense layer ``W`` by ``U_k @ (diag(s_k) V_k^T)``.

    The first factor (``diag(s) V^T``, rank x in) has no bias and no
    activation; the second (``U``, out x rank) keeps the original bias and
    gate.
    """
    layer = net.layers[layer_index]
    if not isinstance(layer, Dense):
        raise ValueError(f"layer {layer_index} is not dense")
    out_dim, in_dim = layer.weights.shape
    if not 1 <= rank <= min(out_dim, in_dim):
        raise ValueError(f"rank must lie in [1, {min(out_dim, in_dim)}], got {rank}")
    u, s, v = svd_truncate(layer.weights.astype(np.float64), rank)
    dtype = layer.weights.dtype
    first = Dense((s[:, None] * v.T).astype(dtype), None)
    second = Dense(u.astype(dtype), None if layer.bias is None else layer.bias.copy(),
                   layer.gate.copy() if layer.gate else None)
    out = net.copy()
    out.layers[layer_index:layer_index + 1] = [first, second]
    out.refresh_flags()
    return out


def equivalence_check(a: Network, b: Network, probes: int = 100, seed: int = 0,
                      tol: float = 1e-6, batch: int = 250):
    """Max absolute logit difference on seeded uniform probes, and pass flag."""
    if a.input_shape != b.input_shape:
        raise DimensionError(f"input shapes differ: {a.input_shape} vs {b.input_shape}")
    if a.num_classes != b.num_classes:
        raise DimensionError(f"output widths differ: {a.num_classes} vs {b.num_classes}")
    rng = SeededRng(seed)
    size = int(np.prod(a.input_shape))
    worst = 0.0
    for start in range(0, probes, batch):
        n = min(batch, probes - start)
        x = rng.uniform(n * size).reshape((n,) + a.input_shape)
        worst = max(worst, float(np.max(np.abs(forward(a, x)[0] - forward(b, x)[0]))))
    return worst, worst <= tol


def run_surgery(net: Network, plan: SurgeryPlan, images=None, labels=None):
    """Prune and/or collapse ``net`` per ``plan``; returns ``(new_net, ArchReport)``."""
    gates = [(i, float(np.sum(l.gate.w, dtype=np.float64)), int(l.gate.d_bin))
             for i, l in enumerate(net.layers) if getattr(l, "gate", None) is not None]
    report = ArchReport(phi_before=architecture_of(net), phi_after=[], params_before=param_count(net),
                        params_after=0, collapsed_layers=sorted(set(plan.collapse_layers)), gates=gates)
    out = prune_widths(net) if plan.prune else net.copy()
    if plan.collapse_layers:
        out = collapse_depth(out, plan)
    report.phi_after = architecture_of(out)
    report.params_after = param_count(out)
    if images is not None:
        report.acc_before = accuracy(net, images, labels)
        report.acc_after = accuracy(out, images, labels)
    return out, report
