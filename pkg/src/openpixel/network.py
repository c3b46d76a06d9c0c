"""The OpenPixel patch classifier: parameters, training and per-pixel inference.

Layer stack (valid convolutions, 55 x 55 x 3 input)::

    conv 3->64   4x4 /2  -> 26   pool 2x2 /2 -> 13
    conv 64->128 4x4 /1  -> 10   pool 2x2 /2 -> 5
    conv 128->256 2x2 /2 -> 2    pool 2x2 /1 -> 1
    fc 256->1024, fc 1024->1024, fc 1024->1024, fc 1024->n_classes

ReLU follows every convolution and every hidden fully connected layer.
"""
from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor_core as tc

log = logging.getLogger(__name__)

PATCH = 55
HALF = PATCH // 2

# (name, out_channels, in_channels, kernel, stride, pool_kernel, pool_stride)
CONV_LAYERS = (
    ("conv1", 64, 3, 4, 2, 2, 2),
    ("conv2", 128, 64, 4, 1, 2, 2),
    ("conv3", 256, 128, 2, 2, 2, 1),
)
FC_HIDDEN = (("fc1", 256, 1024), ("fc2", 1024, 1024), ("fc3", 1024, 1024))
FEATURES = 256


def layer_shapes(n_classes: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, oc, ic, k, *_ in CONV_LAYERS:
        shapes[f"{name}.w"] = (oc, ic, k, k)
        shapes[f"{name}.b"] = (oc,)
    for name, fin, fout in FC_HIDDEN + (("fc_out", 1024, n_classes),):
        shapes[f"{name}.w"] = (fin, fout)
        shapes[f"{name}.b"] = (fout,)
    return shapes


@dataclass
class NetworkParams:
    n_classes: int
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = layer_shapes(self.n_classes)
        if list(self.tensors) != list(expected):
            raise ValueError(f"parameter names {list(self.tensors)} != {list(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["conv1.w"].dtype

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.n_classes, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.n_classes, {k: v.copy() for k, v in self.tensors.items()})

    def equals(self, other: "NetworkParams") -> bool:
        return self.n_classes == other.n_classes and all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 5
    patches_per_class: int = 500
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be positive and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.patches_per_class < 1:
            raise ValueError("batch_size and patches_per_class must be >= 1, epochs >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)


def init_network(n_classes: int, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """He-initialised weights (std = sqrt(2 / fan_in)), zero biases."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in layer_shapes(n_classes).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return NetworkParams(n_classes, tensors)


def to_input(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Scale 8-bit samples to [-0.5, 0.5]."""
    dtype = np.dtype(dtype)
    return pixels.astype(dtype) / dtype.type(255.0) - dtype.type(0.5)


def _features(params: NetworkParams, x: np.ndarray, cache: list | None = None) -> np.ndarray:
    p = params.tensors
    for name, _, _, _, stride, pk, ps in CONV_LAYERS:
        z = tc.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride)
        pooled, idx = tc.maxpool2d(tc.relu(z), pk, ps)
        if cache is not None:
            cache.append((name, x, z, idx))
        x = pooled
    return x.reshape(x.shape[0], -1)


def _head(params: NetworkParams, h: np.ndarray, cache: list | None = None) -> np.ndarray:
    p = params.tensors
    for name, _, _ in FC_HIDDEN:
        z = tc.fully_connected(h, p[f"{name}.w"], p[f"{name}.b"])
        if cache is not None:
            cache.append((name, h, z))
        h = tc.relu(z)
    if cache is not None:
        cache.append(("fc_out", h, None))
    return tc.fully_connected(h, p["fc_out.w"], p["fc_out.b"])


def forward(params: NetworkParams, x: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Logits for a batch of N x 3 x 55 x 55 patches."""
    if x.ndim != 4 or x.shape[1:] != (3, PATCH, PATCH):
        raise ValueError(f"expected N x 3 x {PATCH} x {PATCH} patches, got {x.shape}")
    feats = _features(params, x, cache)
    if feats.shape[1] != FEATURES:
        raise AssertionError(f"pre-FC feature length {feats.shape[1]} != {FEATURES}")
    logits = _head(params, feats, cache)
    return logits


def backward(params: NetworkParams, cache: list, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given the cache filled by :func:`forward`."""
    p = params.tensors
    grads: dict[str, np.ndarray] = {}
    stack = list(cache)
    _, h, _ = stack.pop()
    g = tc.fully_connected_backward(h, p["fc_out.w"], dlogits)
    grads["fc_out.w"], grads["fc_out.b"] = g.dweights, g.dbias
    dh = g.dinput
    for name, _, _ in reversed(FC_HIDDEN):
        _, h, z = stack.pop()
        dz = tc.relu_backward(z, dh)
        g = tc.fully_connected_backward(h, p[f"{name}.w"], dz)
        grads[f"{name}.w"], grads[f"{name}.b"] = g.dweights, g.dbias
        dh = g.dinput
    dx = dh.reshape(dh.shape[0], FEATURES, 1, 1)
    for _, _, _, _, stride, pk, ps in reversed(CONV_LAYERS):
        name, x_in, z, idx = stack.pop()
        da = tc.maxpool2d_backward(z.shape, idx, pk, ps, dx)
        dz = tc.relu_backward(z, da)
        g = tc.conv2d_backward(x_in, p[f"{name}.w"], stride, dz)
        grads[f"{name}.w"], grads[f"{name}.b"] = g.dweights, g.dbias
        dx = g.dinput
    return {k: grads[k] for k in p}


def loss_and_grads(
    params: NetworkParams, x: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    cache: list = []
    logits = forward(params, x, cache)
    loss, probs, dlogits = tc.softmax_cross_entropy(logits, labels)
    return loss, probs, backward(params, cache, dlogits.astype(logits.dtype, copy=False))


def _balanced_epoch(labels: np.ndarray, n_classes: int, per_class: int, rng) -> np.ndarray:
    picks = []
    for c in range(n_classes):
        pool = np.flatnonzero(labels == c)
        if pool.size:
            picks.append(rng.choice(pool, size=min(per_class, pool.size), replace=False))
    order = np.concatenate(picks)
    rng.shuffle(order)
    return order


def train(
    params: NetworkParams,
    patches: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
) -> tuple[NetworkParams, TrainReport]:
    """Minibatch SGD over 8-bit patches (N x 3 x 55 x 55) with known-class labels.

    Each epoch draws ``patches_per_class`` patches of every class (all of them
    when fewer are available).  The input ``params`` are not modified.
    """
    labels = np.asarray(labels)
    if patches.ndim != 4 or patches.shape[1:] != (3, PATCH, PATCH):
        raise ValueError(f"expected N x 3 x {PATCH} x {PATCH} patches, got {patches.shape}")
    if labels.shape != (patches.shape[0],):
        raise ValueError("one label per patch required")
    bad = (labels < 0) | (labels >= params.n_classes)
    if bad.any():
        raise ValueError(
            f"{int(bad.sum())} training labels outside the known classes [0, {params.n_classes}) "
            "(UNKNOWN/IGNORE centres must never reach training)"
        )
    dtype = np.dtype(config.precision)
    params = params.astype(dtype)
    report = TrainReport()
    rng = np.random.default_rng(config.seed)
    velocity: dict[str, np.ndarray] = {}
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = _balanced_epoch(labels, params.n_classes, config.patches_per_class, rng)
        total_loss = 0.0
        correct = 0
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            x = to_input(patches[batch], dtype)
            y = labels[batch]
            loss, probs, grads = loss_and_grads(params, x, y)
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss diverged in epoch {epoch}")
            tc.sgd_update(params.tensors, grads, config.lr, config.momentum, velocity)
            total_loss += loss * batch.size
            correct += int((probs.argmax(axis=1) == y).sum())
        report.loss.append(total_loss / order.size)
        report.accuracy.append(correct / order.size)
        report.seconds.append(time.perf_counter() - t0)
        log.info(
            "epoch %d: loss %.4f acc %.4f (%.1fs)",
            epoch + 1, report.loss[-1], report.accuracy[-1], report.seconds[-1],
        )
    return params, report


def mirror_pad(image: np.ndarray, width: int = HALF) -> np.ndarray:
    """Mirror-pad an H x W x C (or H x W) image on both spatial axes."""
    pad = [(width, width), (width, width)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="symmetric")


def extract_patch(padded: np.ndarray, row: int, col: int) -> np.ndarray:
    """3 x 55 x 55 crop centred on tile pixel (row, col) of a mirror-padded image."""
    return padded[row : row + PATCH, col : col + PATCH].transpose(2, 0, 1)


def _dense_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int, chunk: int) -> np.ndarray:
    """Stride-1 dilated convolution of one C x H x W map, computed row-block by row-block."""
    oc, _, k, _ = w.shape
    span = dilation * (k - 1) + 1
    out_h = x.shape[1] - span + 1
    out_w = x.shape[2] - span + 1
    wmat = w.reshape(oc, -1).T
    out = np.empty((oc, out_h, out_w), dtype=x.dtype)
    rows = max(1, chunk // out_w)
    for r0 in range(0, out_h, rows):
        r1 = min(out_h, r0 + rows)
        cols = tc.im2col(x[None, :, r0 : r1 + span - 1], k, 1, dilation)
        res = tc.gemm(cols, wmat)
        res += b
        out[:, r0:r1] = res.reshape(r1 - r0, out_w, oc).transpose(2, 0, 1)
    return out


def _dense_pool(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    span = dilation * (k - 1) + 1
    h = x.shape[1] - span + 1
    w = x.shape[2] - span + 1
    out = x[:, :h, :w].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                np.maximum(out, x[:, i * dilation : i * dilation + h, j * dilation : j * dilation + w], out=out)
    return out


def _dense_features(params: NetworkParams, padded_strip: np.ndarray, chunk: int) -> np.ndarray:
    """Pre-FC features for every patch centre of a mirror-padded strip.

    Evaluates each convolution densely with the dilation equal to the
    accumulated stride, so every per-patch activation is computed once and
    with exactly the same arithmetic as the patch-wise forward pass.
    """
    x = padded_strip.transpose(2, 0, 1)
    p = params.tensors
    dil = 1
    for name, _, _, _, stride, pk, ps in CONV_LAYERS:
        x = tc.relu(_dense_conv(x, p[f"{name}.w"], p[f"{name}.b"], dil, chunk))
        dil *= stride
        x = _dense_pool(x, pk, dil)
        dil *= ps
    return x  # 256 x H x W


def predict_image(
    params: NetworkParams,
    image: np.ndarray,
    batch_size: int = 4096,
    strip_rows: int = 64,
) -> np.ndarray:
    """Per-pixel class distribution (H x W x n_classes) for an 8-bit H x W x 3 tile.

    Pixel (r, c) gets the softmax of the network applied to the 55 x 55 patch
    centred on it, with the tile mirror-padded by 27 pixels.  Results equal
    running :func:`forward` on each extracted patch.
    """
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"expected an H x W x 3 image, got {image.shape}")
    h, w, _ = image.shape
    dtype = params.dtype
    padded = to_input(mirror_pad(image), dtype)
    probs = np.empty((h, w, params.n_classes), dtype=dtype)
    for r0 in range(0, h, strip_rows):
        r1 = min(h, r0 + strip_rows)
        feats = _dense_features(params, padded[r0 : r1 + PATCH - 1], batch_size)
        # the dense maps run a few positions past the last centre
        feats = feats[:, : r1 - r0, :w].transpose(1, 2, 0).reshape(-1, FEATURES)
        out = np.empty((feats.shape[0], params.n_classes), dtype=dtype)
        for s in range(0, feats.shape[0], batch_size):
            out[s : s + batch_size] = tc.softmax(_head(params, feats[s : s + batch_size]))
        probs[r0:r1] = out.reshape(r1 - r0, w, params.n_classes)
    return probs


def predict_patches(params: NetworkParams, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Softmax outputs for 8-bit N x 3 x 55 x 55 patches."""
    out = []
    for s in range(0, patches.shape[0], batch_size):
        out.append(tc.softmax(forward(params, to_input(patches[s : s + batch_size], params.dtype))))
    return np.concatenate(out) if out else np.empty((0, params.n_classes), params.dtype)


# checkpoint format: magic, u16 version, u16 dtype code, u32 n_classes,
# u32 tensor count, then per tensor: u16 name length, name, u8 ndim,
# u32 dims..., raw little-endian values.
MAGIC = b"OPXCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def save_checkpoint(params: NetworkParams, path: str | Path) -> None:
    code = {v: k for k, v in _DTYPES.items()}[params.dtype.newbyteorder("<")]
    parts = [MAGIC, struct.pack("<HHII", FORMAT_VERSION, code, params.n_classes, len(params.tensors))]
    for name, arr in params.tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, n_classes: int | None = None) -> NetworkParams:
    """Read a checkpoint written by :func:`save_checkpoint`.

    ``n_classes`` guards against loading a model trained for another scheme.
    """
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not an OpenPixel checkpoint")
    version, code, ncls, count = struct.unpack("<HHII", take(12, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    if code not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    if n_classes is not None and ncls != n_classes:
        raise CheckpointError(f"n_classes mismatch: checkpoint has {ncls}, expected {n_classes}")
    expected = layer_shapes(ncls)
    if count != len(expected):
        raise CheckpointError(f"tensor count {count} != {len(expected)}")
    dt = _DTYPES[code]
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        if name not in expected:
            raise CheckpointError(f"unexpected tensor name {name!r}")
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        if shape != expected[name]:
            raise CheckpointError(f"shape mismatch for {name}: {shape} != {expected[name]}")
        n = int(np.prod(shape))
        arr = np.frombuffer(take(n * dt.itemsize, f"{name} values"), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last tensor")
    return NetworkParams(ncls, tensors)


def stack_patches(samples: Iterable) -> tuple[np.ndarray, np.ndarray]:
    """Stack PatchSample-like objects (``pixels``, ``label``) into arrays."""
    xs, ys = [], []
    for s in samples:
        xs.append(s.pixels)
        ys.append(s.label)
    if not xs:
        return np.empty((0, 3, PATCH, PATCH), np.uint8), np.empty((0,), np.int64)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)
