"""Gate regularizers, the optimizer step and the training loop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core_math import SeededRng
from .layers import Network, accuracy, backward, forward, softmax_xent

__all__ = [
    "RegConfig",
    "TrainConfig",
    "MetricsRecord",
    "DivergenceError",
    "Trainer",
    "binarizing_penalty",
    "effective_width",
    "model_complexity_penalty",
    "regularizer_grads",
    "clip_gates",
    "sgd_step",
    "train",
    "suggest_lambdas",
    "complexity_norm",
    "current_architecture",
    "prepare_gates",
    "write_metrics_csv",
    "read_metrics_csv",
]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class RegConfig:
    lambda1: float = 0.0  # width binarizer
    lambda2: float = 0.0  # depth binarizer
    lambda3: float = 0.0  # width complexity
    lambda4: float = 0.0  # depth (linearity) reward
    step_clip: float = 0.1  # max per-update change of any gate value

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.step_clip <= 0:
            raise ValueError("step_clip must be positive")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0  # L2 on weights (not biases or gates)
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    # gates move with lr * gate_lr_scale; 1.0 means the same rate as the weights
    gate_lr_scale: float = 1.0
    lr_decay: float = 1.0  # step decay factor applied every lr_decay_every epochs
    lr_decay_every: int = 1
    w0: float = 1.0
    d0: float = 0.5
    learn_w: bool = True
    learn_d: bool = True
    eval_every: int = 100
    dtype: str = "float32"  # parameter storage; arithmetic is float64
    init_gain: float = 1.0  # weights start in U(-g, g) / sqrt(fan_in)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.init_gain <= 0:
            raise ValueError("init_gain must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class MetricsRecord:
    iteration: int
    loss: float
    r_binarize: float
    r_complexity: float
    phi: list[int]
    val_acc: float = float("nan")


def binarizing_penalty(net: Network, reg: RegConfig):
    """``(total, width_term, depth_term)`` of the w(1-w) / d(1-d) penalty."""
    width = sum(float(np.sum(l.gate.w * (1.0 - l.gate.w))) for l in net.gated_layers)
    depth = sum(l.gate.d * (1.0 - l.gate.d) for l in net.gated_layers)
    width, depth = reg.lambda1 * width, reg.lambda2 * depth
    return width + depth, width, depth


def effective_width(w) -> float:
    return float(np.sum(np.asarray(w, dtype=np.float64)))


def model_complexity_penalty(net: Network, reg: RegConfig) -> float:
    total = 0.0
    for layer in net.gated_layers:
        if layer.gate.d < 0.5:
            total += reg.lambda3 * effective_width(layer.gate.w)
        total -= reg.lambda4 * layer.gate.d
    return total


def regularizer_grads(net: Network, reg: RegConfig):
    """Per gated layer ``(dw, dd)`` of both penalties.

    The indicator 1(d < 0.5) in the complexity term is held constant, so it
    adds ``lambda3`` to every ``dw`` of a non-linear layer and nothing to ``dd``.
    """
    out = []
    for layer in net.gated_layers:
        w, d = layer.gate.w.astype(np.float64), layer.gate.d
        dw = reg.lambda1 * (1.0 - 2.0 * w) + (reg.lambda3 if d < 0.5 else 0.0)
        dd = reg.lambda2 * (1.0 - 2.0 * d) - reg.lambda4
        out.append((dw, dd))
    return out


def clip_gates(net: Network) -> Network:
    for layer in net.gated_layers:
        np.clip(layer.gate.w, 0.0, 1.0, out=layer.gate.w)
        layer.gate.d = min(max(layer.gate.d, 0.0), 1.0)
    net.touch()
    return net


def _check_finite(arr, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite gradient in {what}")


def sgd_step(net: Network, grads, reg_grads, cfg: TrainConfig, reg: RegConfig,
             state: dict | None = None, lr: float | None = None) -> Network:
    """Apply one update: weights with momentum, then ``w``, then ``d``.

    ``state`` holds the momentum buffers (keyed by layer index) and is
    updated in place. Gates use plain SGD; each gate step
    ``-lr_gate * (loss_grad + reg_grad)`` is clipped to ``[-s, s]`` before
    being applied, and the result is projected onto [0, 1].
    """
    lr = cfg.lr if lr is None else lr
    state = {} if state is None else state
    for idx, layer in enumerate(net.layers):
        if grads.weights[idx] is not None:
            _check_finite(grads.weights[idx], f"layer {idx} weights")
            if grads.bias[idx] is not None:
                _check_finite(grads.bias[idx], f"layer {idx} bias")
    for idx, layer in enumerate(net.layers):
        if grads.weights[idx] is None:
            continue
        for name, param in layer.params().items():
            g = grads.weights[idx] if name == "weights" else grads.bias[idx]
            if name == "weights" and cfg.weight_decay:
                g = g + cfg.weight_decay * param
            key = f"{idx}.{name}"
            vel = state.get(key)
            if vel is None:
                vel = np.zeros_like(param)
            vel64 = cfg.momentum * vel.astype(np.float64) - lr * g
            vel[...] = vel64
            state[key] = vel
            param[...] = param.astype(np.float64) + vel.astype(np.float64)

    gate_lr = lr * cfg.gate_lr_scale
    gated = [(idx, l) for idx, l in enumerate(net.layers) if getattr(l, "gate", None) is not None]
    for (idx, layer), (rdw, _) in zip(gated, reg_grads):
        gate = layer.gate
        if not gate.learn_w:
            continue
        g = grads.w[idx] + rdw
        _check_finite(g, f"layer {idx} width gates")
        step = np.clip(-gate_lr * g, -reg.step_clip, reg.step_clip)
        gate.w[...] = np.clip(gate.w.astype(np.float64) + step, 0.0, 1.0)
    for (idx, layer), (_, rdd) in zip(gated, reg_grads):
        gate = layer.gate
        if not gate.learn_d:
            continue
        g = grads.d[idx] + rdd
        _check_finite(g, f"layer {idx} depth gate")
        step = min(max(-gate_lr * g, -reg.step_clip), reg.step_clip)
        gate.d = float(np.asarray(min(max(gate.d + step, 0.0), 1.0), dtype=gate.w.dtype))
    net.touch()
    return net


def current_architecture(net: Network) -> list[int]:
    """Binarized widths of every parameterized layer, output included."""
    return [int(l.gate.w_bin.sum()) if l.gate is not None else l.width for l in net.param_layers]


def complexity_norm(phi) -> int:
    phi = [int(n) for n in phi]
    if any(n < 0 for n in phi):
        raise ValueError("architecture entries must be non-negative")
    return sum(phi)


def suggest_lambdas(initial_arch, reference_width: int = 500, base_lambda3: float = 1e-5,
                    width_ratio: float = 2.5, step_clip: float = 0.1) -> RegConfig:
    """Regularizer weights from the widest layer of ``initial_arch``.

    ``lambda3`` scales inversely with the widest layer (``base_lambda3`` at
    ``reference_width``), ``lambda1 = width_ratio * lambda3`` and the depth
    weights are a tenth of their width counterparts.
    """
    phi = list(initial_arch)
    if not phi:
        raise ValueError("architecture must be non-empty")
    lam3 = base_lambda3 * reference_width / max(phi)
    lam1 = width_ratio * lam3
    return RegConfig(lambda1=lam1, lambda2=lam1 / 10.0, lambda3=lam3, lambda4=lam3 / 10.0,
                     step_clip=step_clip)


def prepare_gates(net: Network, cfg: TrainConfig) -> Network:
    """Reset gates to the configured initial values and learn flags."""
    dtype = np.dtype(cfg.dtype)
    for layer in net.gated_layers:
        gate = layer.gate
        gate.w = np.full(layer.width, cfg.w0, dtype=dtype)
        gate.learn_w = cfg.learn_w
        gate.learn_d = cfg.learn_d and layer.collapsible
        gate.d = float(np.asarray(cfg.d0 if gate.learn_d else 0.0, dtype=dtype))
    net.touch()
    return net


@dataclass
class Trainer:
    """Minibatch SGD over a dataset with all state needed to resume exactly.

    Each epoch visits the training set in an order drawn from the seeded
    generator. ``rng_state`` is the generator state at the start of the
    current epoch, so the permutation can be rebuilt after a restart.
    """

    net: Network
    images: np.ndarray
    labels: np.ndarray
    cfg: TrainConfig
    reg: RegConfig
    val_images: np.ndarray | None = None
    val_labels: np.ndarray | None = None
    iteration: int = 0
    epoch: int = 0
    position: int = 0
    rng_state: int | None = None
    velocity: dict = field(default_factory=dict)
    timeline: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("training set is empty")
        if self.rng_state is None:
            self.rng_state = SeededRng(self.cfg.seed).state
        self._order = None

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.labels) / self.cfg.batch_size)

    @property
    def done(self) -> bool:
        return self.epoch >= self.cfg.epochs

    def current_lr(self) -> float:
        return self.cfg.lr * self.cfg.lr_decay ** (self.epoch // self.cfg.lr_decay_every)

    def _epoch_order(self) -> np.ndarray:
        if self._order is None:
            rng = SeededRng(0)
            rng.state = self.rng_state
            self._order = rng.permutation(len(self.labels))
            self._next_state = rng.state
        return self._order

    def step(self) -> float:
        order = self._epoch_order()
        bs = self.cfg.batch_size
        idx = order[self.position * bs:(self.position + 1) * bs]
        x = self.images[idx].astype(np.float64)
        y = self.labels[idx]
        logits, cache = forward(self.net, x)
        loss, dlogits = softmax_xent(logits, y)
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at iteration {self.iteration}")
        grads = backward(self.net, cache, dlogits)
        sgd_step(self.net, grads, regularizer_grads(self.net, self.reg), self.cfg, self.reg,
                 self.velocity, self.current_lr())
        self.iteration += 1
        self.position += 1
        self.last_loss = loss
        if self.iteration % self.cfg.eval_every == 0:
            self.record(loss)
        if self.position >= self.steps_per_epoch:
            self.epoch += 1
            self.position = 0
            self.rng_state = self._next_state
            self._order = None
        return loss

    def record(self, loss: float) -> MetricsRecord:
        val = float("nan")
        if self.val_images is not None and len(self.val_labels):
            val = accuracy(self.net, self.val_images, self.val_labels)
        rec = MetricsRecord(self.iteration, float(loss), binarizing_penalty(self.net, self.reg)[0],
                            model_complexity_penalty(self.net, self.reg),
                            current_architecture(self.net), val)
        self.timeline.append(rec)
        return rec

    def save(self, path, extra: dict | None = None) -> None:
        """Checkpoint the network, momentum buffers and shuffling state."""
        from .data_io import save_checkpoint

        save_checkpoint(self.net, path, self.iteration, self.rng_state, extra, self.velocity)

    @classmethod
    def resume(cls, path, images, labels, cfg: TrainConfig, reg: RegConfig,
               val_images=None, val_labels=None) -> "Trainer":
        """Continue a run saved with :meth:`save` exactly where it stopped."""
        from .data_io import load_checkpoint

        net, meta = load_checkpoint(path, with_meta=True)
        velocity = {}
        for key, blob in meta["optimizer"].items():
            idx, name = key.split(".", 1)
            param = net.layers[int(idx)].params()[name]
            velocity[key] = blob.reshape(param.shape).astype(param.dtype)
        trainer = cls(net, images, labels, cfg, reg, val_images, val_labels,
                      rng_state=meta["rng_state"], velocity=velocity)
        trainer.iteration = meta["iteration"]
        trainer.epoch, trainer.position = divmod(trainer.iteration, trainer.steps_per_epoch)
        return trainer

    def run(self, max_steps: int | None = None):
        taken = 0
        while not self.done and (max_steps is None or taken < max_steps):
            self.step()
            taken += 1
        if self.done and (not self.timeline or self.timeline[-1].iteration != self.iteration) \
                and self.iteration > 0:
            self.record(self.last_loss)
        return self.net, self.timeline


def train(net: Network, images, labels, cfg: TrainConfig, reg: RegConfig,
          val_images=None, val_labels=None):
    """Minimize loss + binarizing + complexity penalties by minibatch SGD.

    Gates keep whatever values and learn flags ``net`` already has; use
    :func:`prepare_gates` to reset them from ``cfg``. Returns the trained
    network and its metrics timeline.
    """
    trainer = Trainer(net, np.asarray(images), np.asarray(labels), cfg, reg, val_images, val_labels)
    return trainer.run()


_CSV_COLUMNS = ["iter", "loss", "r_binarize", "r_complexity", "phi_json", "val_acc"]


def write_metrics_csv(path, timeline, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for r in timeline:
            writer.writerow([r.iteration, repr(float(r.loss)), repr(float(r.r_binarize)),
                             repr(float(r.r_complexity)), json.dumps(list(r.phi)),
                             repr(float(r.val_acc))])


def read_metrics_csv(path):
    """Parse a metrics CSV; returns ``(comment_lines, records)``."""
    comments, rows = [], []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                lines.append(line)
    reader = csv.DictReader(lines)
    missing = [c for c in _CSV_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    for row in reader:
        rows.append(MetricsRecord(int(row["iter"]), float(row["loss"]), float(row["r_binarize"]),
                                  float(row["r_complexity"]), json.loads(row["phi_json"]),
                                  float(row["val_acc"])))
    return comments, rows


def config_dict(obj) -> dict:
    return asdict(obj)
