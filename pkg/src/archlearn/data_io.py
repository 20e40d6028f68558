"""Datasets (MNIST IDX, synthetic blobs) and checkpoint files."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_math import SeededRng
from .layers import Conv2d, Dense, Gate, MaxPool, Network

__all__ = [
    "Dataset",
    "ParseError",
    "FormatError",
    "load_mnist_idx",
    "write_idx",
    "filter_classes",
    "synth_blobs",
    "train_val_split",
    "save_checkpoint",
    "load_checkpoint",
    "mnist_paths",
    "build_mnist_subset",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class FormatError(ValueError):
    """Checkpoint container is malformed."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) or (N, D), values in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError(f"{self.split} split is empty")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    def flat(self) -> "Dataset":
        return Dataset(self.images.reshape(len(self), -1), self.labels, self.class_count, self.split)


def _read_idx(path, expected_magic: int, ndim: int):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise ParseError(f"{path}: file too short for magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ParseError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    if len(raw) < header:
        raise ParseError(f"{path}: truncated header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise ParseError(f"{path}: truncated payload, expected {header + size} bytes", len(raw))
    if len(raw) > header + size:
        raise ParseError(f"{path}: {len(raw) - header - size} trailing bytes", header + size)
    return np.frombuffer(raw, dtype=np.uint8, offset=header, count=size).reshape(dims)


def load_mnist_idx(images_path, labels_path, split: str = "train", class_count: int = 10) -> Dataset:
    """Parse an IDX image/label file pair into a Dataset of (N, 1, H, W) images."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ParseError(f"{len(images)} images but {len(labels)} labels", 4)
    pixels = images.astype(np.float32) / np.float32(255.0)
    return Dataset(pixels[:, None, :, :], labels.astype(np.int64), class_count, split)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (images: 3-D, labels: 1-D)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {3: IMAGES_MAGIC, 1: LABELS_MAGIC}[arr.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def filter_classes(ds: Dataset, k: int) -> Dataset:
    if not 2 <= k <= ds.class_count:
        raise ValueError(f"class count must lie in [2, {ds.class_count}], got {k}")
    keep = ds.labels < k
    return Dataset(ds.images[keep], ds.labels[keep], k, ds.split)


def train_val_split(ds: Dataset, val_size: int = 5000):
    """Hold out the last ``val_size`` samples as the validation split."""
    if not 0 < val_size < len(ds):
        raise ValueError("validation size must be smaller than the dataset")
    cut = len(ds) - val_size
    return (Dataset(ds.images[:cut], ds.labels[:cut], ds.class_count, "train"),
            Dataset(ds.images[cut:], ds.labels[cut:], ds.class_count, "val"))


def synth_blobs(n_per_class: int, classes: int, dim: int, separation: float, seed: int,
                split: str = "train") -> Dataset:
    """Unit-variance Gaussian clusters around random centres.

    Centres are the vertices of a randomly rotated regular simplex, so every
    pair of centres is exactly ``separation`` standard deviations apart.
    Requires ``dim >= classes``.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dim < classes:
        raise ValueError(f"dim ({dim}) must be at least the class count ({classes})")
    if n_per_class < 1:
        raise ValueError(f"{split} split is empty")
    rng = SeededRng(seed)
    basis, _ = np.linalg.qr(rng.normal(dim * dim).reshape(dim, dim))
    centres = basis[:, :classes].T * (separation / np.sqrt(2.0))
    noise = rng.normal(classes * n_per_class * dim).reshape(classes * n_per_class, dim)
    labels = np.repeat(np.arange(classes), n_per_class)
    points = centres[labels] + noise
    images = points.astype(np.float32)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order].astype(np.int64), classes, split)


# ---------------------------------------------------------------------------
# MNIST files

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def mnist_paths(data_dir, split: str):
    """IDX paths for ``split`` under ``data_dir`` (also accepts the dotted names)."""
    data_dir = Path(data_dir)
    found = []
    for stem in MNIST_FILES[split]:
        for cand in (stem, stem.replace("-idx", ".idx")):
            if (data_dir / cand).exists():
                found.append(data_dir / cand)
                break
        else:
            raise FileNotFoundError(f"{data_dir / stem} not found")
    return tuple(found)


def build_mnist_subset(out_dir, test_per_class: int = 100) -> Path:
    """Write the 5000-digit MNIST sample bundled with mlxtend as IDX files.

    The sample holds 500 images per digit; the last ``test_per_class`` of
    each digit become the test split. Requires the optional ``mlxtend``
    package.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = np.asarray(x).reshape(-1, 28, 28).astype(np.uint8)
    y = np.asarray(y).astype(np.uint8)
    train_idx, test_idx = [], []
    for digit in range(10):
        members = np.flatnonzero(y == digit)
        train_idx.append(members[:-test_per_class])
        test_idx.append(members[-test_per_class:])
    # interleave digits so any prefix or suffix is class balanced
    train_idx = np.stack(train_idx, axis=1).reshape(-1)
    test_idx = np.stack(test_idx, axis=1).reshape(-1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(out / img_name, x[idx])
        write_idx(out / lbl_name, y[idx])
    return out


# ---------------------------------------------------------------------------
# Checkpoints

CKPT_MAGIC = b"ALNCKPT1"
CKPT_VERSION = 1


def _layer_header(layer) -> dict:
    if isinstance(layer, MaxPool):
        return {"kind": "pool", "window": layer.window}
    weights = layer.params()["weights"]
    head = {"kind": layer.kind, "shape": list(weights.shape), "dtype": str(weights.dtype),
            "bias": layer.bias is not None}
    if layer.gate is not None:
        head["gate"] = {"learn_w": layer.gate.learn_w, "learn_d": layer.gate.learn_d,
                        "d": float(np.float32(layer.gate.d)), "dtype": str(layer.gate.w.dtype)}
    return head


def save_checkpoint(net: Network, path, iteration: int = 0, rng_state: int | None = None,
                    extra: dict | None = None, optimizer: dict | None = None) -> None:
    """Write ``net`` (and optional optimizer state) to a single ALNCKPT1 file.

    Layout: 8-byte magic, u32 version, u32 header length, UTF-8 JSON header,
    then little-endian float32 blobs in the order listed in the header.
    """
    blobs, order = [], []

    def add(name, arr):
        data = np.ascontiguousarray(arr, dtype="<f4")
        blobs.append(data.tobytes())
        order.append({"name": name, "count": int(data.size), "shape": list(np.shape(arr))})

    for idx, layer in enumerate(net.layers):
        if isinstance(layer, MaxPool):
            continue
        add(f"{idx}.weights", layer.params()["weights"])
        if layer.bias is not None:
            add(f"{idx}.bias", layer.bias)
        if layer.gate is not None:
            add(f"{idx}.gate_w", layer.gate.w)
    for key in sorted(optimizer or {}):
        add(f"opt.{key}", optimizer[key])
    header = {
        "input_shape": list(net.input_shape),
        "layers": [_layer_header(l) for l in net.layers],
        "ste_binarized_partner": net.ste_binarized_partner,
        "iteration": int(iteration),
        "rng_state": None if rng_state is None else str(int(rng_state)),
        "blobs": order,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path, with_meta: bool = False):
    """Read a checkpoint; returns the network, or ``(net, meta)`` if asked.

    ``meta`` carries ``iteration``, ``rng_state``, ``extra`` and the
    ``optimizer`` blobs.
    """
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    offset = 16 + hlen
    blobs = {}
    for entry in header["blobs"]:
        size = 4 * entry["count"]
        if offset + size > len(raw):
            raise FormatError(f"{path}: blob {entry['name']} needs {size} bytes, "
                              f"{len(raw) - offset} left")
        blob = np.frombuffer(raw, dtype="<f4", count=entry["count"], offset=offset)
        shape = entry.get("shape")
        if shape is not None:
            if int(np.prod(shape)) != entry["count"]:
                raise FormatError(f"{path}: blob {entry['name']} shape {shape} does not match "
                                  f"count {entry['count']}")
            blob = blob.reshape(shape)
        blobs[entry["name"]] = blob
        offset += size
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} unexpected trailing bytes")

    layers = []
    for idx, head in enumerate(header["layers"]):
        if head["kind"] == "pool":
            layers.append(MaxPool(head["window"]))
            continue
        dtype = np.dtype(head["dtype"])
        shape = tuple(head["shape"])
        weights = blobs[f"{idx}.weights"].reshape(shape).astype(dtype)
        bias = blobs[f"{idx}.bias"].reshape(-1).astype(dtype) if head["bias"] else None
        gate = None
        if "gate" in head:
            g = head["gate"]
            gate = Gate(blobs[f"{idx}.gate_w"].reshape(-1).astype(g["dtype"]), g["d"], g["learn_w"],
                        g["learn_d"])
        layer = Conv2d(weights, bias, gate) if head["kind"] == "conv" else Dense(weights, bias, gate)
        layers.append(layer)
    net = Network(tuple(header["input_shape"]), layers, header["ste_binarized_partner"])
    if not with_meta:
        return net
    meta = {
        "iteration": header["iteration"],
        "rng_state": None if header["rng_state"] is None else int(header["rng_state"]),
        "extra": header["extra"],
        "optimizer": {k[4:]: v.copy() for k, v in blobs.items() if k.startswith("opt.")},
    }
    return net, meta
