"""Minimal CNN engine: inference, penultimate-layer embeddings, SGD training.

The production architecture is fixed: two 3x3 convolution layers (8 and 16
filters, ReLU), each followed by 2x2 max-pooling, a fully connected hidden
layer of width 128 (ReLU) whose activations are the token embedding, and a
softmax output of width 10.  Internally the forward/backward passes are
generic over a layer-spec list so that tiny throwaway networks can be built
for gradient checking.

Training is plain mini-batch SGD on cross-entropy with a fixed learning rate,
seeded uniform weight init in [-r, r] with r = sqrt(6 / (fan_in + fan_out)).
Given the same dataset and seed, two runs produce bitwise-identical weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .errors import FormatError, InputError, ParameterError, TrainingError

EMBED_DIM = 128
N_CLASSES = 10
INPUT_SHAPE = (28, 28, 1)

__all__ = [
    "EMBED_DIM",
    "N_CLASSES",
    "INPUT_SHAPE",
    "ConvSpec",
    "PoolSpec",
    "DenseSpec",
    "SoftmaxSpec",
    "Model",
    "TrainConfig",
    "init_model",
    "forward",
    "forward_batch",
    "embed",
    "embed_batch",
    "train",
    "evaluate",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int


@dataclass(frozen=True)
class PoolSpec:
    size: int = 2


@dataclass(frozen=True)
class DenseSpec:
    width: int


@dataclass(frozen=True)
class SoftmaxSpec:
    width: int


DEFAULT_LAYERS = (
    ConvSpec(8, 3),
    PoolSpec(2),
    ConvSpec(16, 3),
    PoolSpec(2),
    DenseSpec(EMBED_DIM),
    SoftmaxSpec(N_CLASSES),
)


@dataclass
class Model:
    """Layer descriptors plus one (weight, bias) pair per parameterised layer.

    ``params`` runs parallel to ``layers`` with ``None`` at pooling positions.
    ``loss_history`` holds the mean epoch losses of the producing training
    run; it is runtime metadata and is not persisted.
    """

    layers: tuple
    params: list
    input_shape: tuple = INPUT_SHAPE
    loss_history: tuple = field(default_factory=tuple)

    @property
    def embedding_width(self) -> int:
        dense = [s for s in self.layers if isinstance(s, DenseSpec)]
        return dense[-1].width if dense else 0

    @property
    def output_width(self) -> int:
        return self.layers[-1].width

    def copy(self) -> "Model":
        return replace(self, params=[None if p is None else (p[0].copy(), p[1].copy()) for p in self.params])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    learning_rate: float = 0.05
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")


def init_model(seed: int = 0, layers: tuple = DEFAULT_LAYERS, input_shape: tuple = INPUT_SHAPE) -> Model:
    """Build a model with seeded uniform [-r, r] weights, r = sqrt(6/(fan_in+fan_out))."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    params = []
    flat = None  # width once spatial dims are flattened
    for spec in layers:
        if isinstance(spec, ConvSpec):
            fan_in = c * spec.kernel * spec.kernel
            fan_out = spec.filters * spec.kernel * spec.kernel
            r = np.sqrt(6.0 / (fan_in + fan_out))
            wgt = rng.uniform(-r, r, size=(spec.filters, c, spec.kernel, spec.kernel))
            params.append((wgt, np.zeros(spec.filters)))
            h, w, c = h - spec.kernel + 1, w - spec.kernel + 1, spec.filters
        elif isinstance(spec, PoolSpec):
            params.append(None)
            h, w = h // spec.size, w // spec.size
        elif isinstance(spec, (DenseSpec, SoftmaxSpec)):
            n_in = flat if flat is not None else h * w * c
            r = np.sqrt(6.0 / (n_in + spec.width))
            wgt = rng.uniform(-r, r, size=(n_in, spec.width))
            params.append((wgt, np.zeros(spec.width)))
            flat = spec.width
        else:
            raise ParameterError(f"unknown layer spec {spec!r}")
    return Model(layers=tuple(layers), params=params, input_shape=tuple(input_shape))


def _as_batch(model: Model, images: np.ndarray) -> np.ndarray:
    h, w, c = model.input_shape
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 4 and x.shape[-1] == c:  # (B, H, W, C) -> drop/move channel
        x = np.moveaxis(x, -1, 1)
    elif x.ndim == 3:
        x = x[:, None, :, :]
    if x.shape[1:] != (c, h, w):
        raise InputError(f"image batch shape {images.shape} does not match input shape {model.input_shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("image contains non-finite pixels")
    return np.ascontiguousarray(x)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_pass(model: Model, x: np.ndarray, keep: bool = False):
    """Run the network; returns (probs, embedding, caches).

    ``caches`` is populated only when ``keep`` is true (training).  The
    embedding is the post-ReLU activation of the last hidden dense layer.
    """
    caches = []
    embedding = None
    a = x
    for spec, prm in zip(model.layers, model.params):
        if isinstance(spec, ConvSpec):
            wgt, bias = prm
            z = K.conv2d_forward(a, wgt, bias)
            mask = z > 0.0
            out = z * mask
            if keep:
                caches.append(("conv", a, wgt, mask))
            a = out
        elif isinstance(spec, PoolSpec):
            out, idx = K.maxpool2_forward(a)
            if keep:
                caches.append(("pool", idx, a.shape[2], a.shape[3]))
            a = out
        elif isinstance(spec, DenseSpec):
            if a.ndim > 2:
                shape = a.shape
                a = a.reshape(shape[0], -1)
                if keep:
                    caches.append(("flatten", shape))
            wgt, bias = prm
            z = a @ wgt + bias
            mask = z > 0.0
            out = z * mask
            if keep:
                caches.append(("dense", a, wgt, mask))
            embedding = out
            a = out
        else:  # SoftmaxSpec
            if a.ndim > 2:
                shape = a.shape
                a = a.reshape(shape[0], -1)
                if keep:
                    caches.append(("flatten", shape))
            wgt, bias = prm
            z = a @ wgt + bias
            probs = _softmax(z)
            if keep:
                caches.append(("softmax", a, wgt, probs))
            if embedding is None:
                embedding = a
            a = probs
    return a, embedding, caches


def _loss_and_grads(model: Model, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and gradients per parameterised layer."""
    probs, _, caches = _forward_pass(model, x, keep=True)
    n = x.shape[0]
    eps = 1e-12
    loss = -np.log(probs[np.arange(n), labels] + eps).mean()

    grads: list = [None] * len(model.params)
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    ci = len(caches) - 1
    pi = len(model.params) - 1
    while ci >= 0:
        kind = caches[ci][0]
        if kind == "softmax" or kind == "dense":
            _, a_in, wgt, *rest = caches[ci]
            if kind == "dense":
                delta = delta * rest[0]  # ReLU mask
            grads[pi] = (a_in.T @ delta, delta.sum(axis=0))
            delta = delta @ wgt.T
            pi -= 1
        elif kind == "flatten":
            delta = delta.reshape(caches[ci][1])
        elif kind == "pool":
            _, idx, h, w = caches[ci]
            delta = K.maxpool2_backward(delta, idx, h, w)
            grads[pi] = None
            pi -= 1
        elif kind == "conv":
            _, a_in, wgt, mask = caches[ci]
            delta = delta * mask
            dx, dw, db = K.conv2d_backward(a_in, wgt, delta)
            grads[pi] = (dw, db)
            delta = dx
            pi -= 1
        ci -= 1
    return loss, grads


def forward(model: Model, image: np.ndarray):
    """Classify one image; returns (class_probs, embedding).

    Accepts (H, W) or (H, W, C).  The probabilities are a softmax distribution
    over the output classes and the embedding is the activation vector of the
    hidden dense layer.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w, c = model.input_shape
    if img.shape == (h, w, c):
        img = np.moveaxis(img, -1, 0)
    elif img.shape == (h, w) and c == 1:
        img = img[None]
    else:
        raise InputError(f"image shape {np.asarray(image).shape} does not match input shape {model.input_shape}")
    probs, emb = forward_batch(model, img[None] if img.ndim == 3 else img)
    return probs[0], emb[0]


def forward_batch(model: Model, images: np.ndarray):
    x = _as_batch(model, images)
    probs, emb, _ = _forward_pass(model, x)
    return probs, emb


def embed(model: Model, image: np.ndarray) -> np.ndarray:
    """Penultimate-layer embedding of one image; equals forward(...)[1]."""
    return forward(model, image)[1]


def embed_batch(model: Model, images: np.ndarray) -> np.ndarray:
    return forward_batch(model, images)[1]


def train(dataset, cfg: TrainConfig) -> Model:
    """Train the fixed architecture on a labeled image set.

    Deterministic for a given seed: weight init, shuffling and batch order all
    derive from ``cfg.seed``.  Raises :class:`TrainingError` naming the epoch
    if the loss stops being finite.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise InputError("training dataset is empty")
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise InputError("labels must be in 0..9")

    model = init_model(cfg.seed)
    x_all = _as_batch(model, images)
    rng = np.random.default_rng(cfg.seed + 1)
    n = x_all.shape[0]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            loss, grads = _loss_and_grads(model, x_all[sel], labels[sel])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            total += loss * sel.size
            for i, g in enumerate(grads):
                if g is None:
                    continue
                wgt, bias = model.params[i]
                wgt -= cfg.learning_rate * g[0]
                bias -= cfg.learning_rate * g[1]
        history.append(total / n)
    model.loss_history = tuple(history)
    return model


def evaluate(model: Model, dataset, batch_size: int = 256) -> float:
    """Fraction of images whose argmax class matches the label."""
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        probs, _ = forward_batch(model, images[start:start + batch_size])
        hits += int((probs.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return hits / max(1, images.shape[0])


# ---------------------------------------------------------------------------
# persistence: little-endian binary, versioned header
#
#   magic    4s   b"SLXM"
#   version  u32  1
#   height, width, channels  u32 x3
#   n_layers u32
#   per layer: kind u32 (0 conv, 1 pool, 2 dense, 3 softmax) + u32 x2
#       conv:    filters, kernel      pool: size, 0
#       dense:   width, 0             softmax: width, 0
#   per parameterised layer, in order: weight then bias as raw float64 LE
#   (shapes are implied by the layer table).
# ---------------------------------------------------------------------------

_MAGIC = b"SLXM"
_VERSION = 1
_KINDS = {ConvSpec: 0, PoolSpec: 1, DenseSpec: 2, SoftmaxSpec: 3}


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        h, w, c = model.input_shape
        fh.write(struct.pack("<III", h, w, c))
        fh.write(struct.pack("<I", len(model.layers)))
        for spec in model.layers:
            kind = _KINDS[type(spec)]
            if isinstance(spec, ConvSpec):
                a, b = spec.filters, spec.kernel
            elif isinstance(spec, PoolSpec):
                a, b = spec.size, 0
            else:
                a, b = spec.width, 0
            fh.write(struct.pack("<III", kind, a, b))
        for prm in model.params:
            if prm is None:
                continue
            wgt, bias = prm
            fh.write(np.ascontiguousarray(wgt, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(bias, dtype="<f8").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    h, w, c = struct.unpack_from("<III", blob, 8)
    (n_layers,) = struct.unpack_from("<I", blob, 20)
    off = 24
    layers = []
    for _ in range(n_layers):
        kind, a, b = struct.unpack_from("<III", blob, off)
        off += 12
        if kind == 0:
            layers.append(ConvSpec(a, b))
        elif kind == 1:
            layers.append(PoolSpec(a))
        elif kind == 2:
            layers.append(DenseSpec(a))
        elif kind == 3:
            layers.append(SoftmaxSpec(a))
        else:
            raise FormatError(f"{path}: unknown layer kind {kind} at offset {off - 12}")

    skeleton = init_model(0, tuple(layers), (h, w, c))
    params = []
    for prm in skeleton.params:
        if prm is None:
            params.append(None)
            continue
        shapes = (prm[0].shape, prm[1].shape)
        pair = []
        for shape in shapes:
            count = int(np.prod(shape))
            end = off + 8 * count
            if end > len(blob):
                raise FormatError(f"{path}: truncated weight blob at offset {off}")
            pair.append(np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).copy())
            off = end
        params.append((pair[0], pair[1]))
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after weight blobs")
    return Model(layers=tuple(layers), params=params, input_shape=(h, w, c))
