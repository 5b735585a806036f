"""Feed-forward neural-network engine with manual backpropagation.

Dense layers, 2-D convolution (valid padding, stride 1), 2x2 max pooling and
ReLU, trained with momentum SGD. All math is float64 numpy on the CPU and
every public operation is pure: callers get new arrays back, inputs are never
mutated, and identical inputs produce bit-identical outputs.

A model is a flat, ordered list of parameter layers; weight tensors and bias
vectors each occupy their own layer index. The execution plan that wires the
parameters into a network is looked up from the architecture registry by
``arch_id``, which keeps layer indices stable across runs so that cut-layer
boundaries mean the same thing everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import rng_for

LAYER_KINDS = ("dense", "conv2d", "bias", "batchnorm_free")
ARCH_IDS = ("mlp-2", "lenet-s")

MLP_HIDDEN = 64
LENET_CH1 = 6
LENET_CH2 = 16
LENET_KERNEL = 5
LENET_HIDDEN = 64


class ShapeError(ValueError):
    """Input or parameter shapes do not line up; message names the layer."""


class IsolationError(RuntimeError):
    """A locally-held (never distributed) layer was accessed."""


@dataclass
class Layer:
    """One parameter group. ``params is None`` marks a layer whose values are
    held locally by some client and were never distributed."""

    index: int
    kind: str
    params: tuple[np.ndarray, ...] | None


@dataclass
class LayeredModel:
    arch_id: str
    num_classes: int
    input_shape: tuple[int, ...]
    layers: list[Layer]
    # Invoked with the layer index whenever code tries to read a local-only
    # layer; used by the federation engine to count isolation violations.
    on_sentinel_access: Callable[[int], None] | None = field(
        default=None, compare=False, repr=False
    )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def array(self, idx: int) -> np.ndarray:
        layer = self.layers[idx]
        if layer.params is None:
            if self.on_sentinel_access is not None:
                self.on_sentinel_access(idx)
            raise IsolationError(
                f"layer {idx} ({layer.kind}) is held locally and was never distributed"
            )
        return layer.params[0]

    def has_sentinels(self) -> bool:
        return any(layer.params is None for layer in self.layers)

    def sentinel_indices(self) -> list[int]:
        return [layer.index for layer in self.layers if layer.params is None]


@dataclass
class TrainingConfig:
    """Local SGD hyperparameters; the learning rate is multiplied by
    ``lr_decay_base ** round_t`` each round."""

    learning_rate: float = 6.7e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    local_iterations: int = 1
    lr_decay_base: float = 0.998
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_iterations < 1:
            raise ValueError(
                f"local_iterations must be >= 1, got {self.local_iterations}"
            )
        if not 0 < self.lr_decay_base <= 1:
            raise ValueError(
                f"lr_decay_base must be in (0, 1], got {self.lr_decay_base}"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be unsigned, got {self.seed}")


# ---------------------------------------------------------------------------
# Plan ops: forward returns (output, cache); backward consumes the cache and
# fills ``grads`` (list indexed by layer) before returning the input gradient.
# ---------------------------------------------------------------------------


class _Dense:
    def __init__(self, w_idx: int, b_idx: int):
        self.w_idx = w_idx
        self.b_idx = b_idx

    def forward(self, x, model):
        w = model.array(self.w_idx)
        b = model.array(self.b_idx)
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"layer {self.w_idx} (dense): input of shape {x.shape} does not "
                f"match weight {w.shape}"
            )
        return x @ w + b, x

    def backward(self, dy, cache, model, grads):
        x = cache
        w = model.array(self.w_idx)
        grads[self.w_idx] = x.T @ dy
        grads[self.b_idx] = dy.sum(axis=0)
        return dy @ w.T


class _Conv2d:
    """Valid padding, stride 1, square kernel."""

    def __init__(self, w_idx: int, b_idx: int):
        self.w_idx = w_idx
        self.b_idx = b_idx

    def forward(self, x, model):
        w = model.array(self.w_idx)  # (out_ch, in_ch, k, k)
        b = model.array(self.b_idx)
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"layer {self.w_idx} (conv2d): input of shape {x.shape} does not "
                f"match kernel {w.shape}"
            )
        k = w.shape[2]
        if x.shape[2] < k or x.shape[3] < k:
            raise ShapeError(
                f"layer {self.w_idx} (conv2d): spatial size {x.shape[2:]} smaller "
                f"than kernel {k}x{k}"
            )
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # (n,c,h',w',k,k)
        y = np.einsum("nchwuv,ocuv->nohw", win, w, optimize=True)
        y += b[None, :, None, None]
        return y, (x, win)

    def backward(self, dy, cache, model, grads):
        x, win = cache
        w = model.array(self.w_idx)
        k = w.shape[2]
        grads[self.w_idx] = np.einsum("nchwuv,nohw->ocuv", win, dy, optimize=True)
        grads[self.b_idx] = dy.sum(axis=(0, 2, 3))
        dy_pad = np.pad(dy, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        dwin = sliding_window_view(dy_pad, (k, k), axis=(2, 3))  # (n,o,h,w,k,k)
        w_flip = w[:, :, ::-1, ::-1]
        return np.einsum("nohwuv,ocuv->nchw", dwin, w_flip, optimize=True)


class _MaxPool2:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    def forward(self, x, model):
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"max-pool needs at least 2x2 input, got {x.shape}")
        h2, w2 = h // 2, w // 2
        tiles = x[:, :, : h2 * 2, : w2 * 2].reshape(n, c, h2, 2, w2, 2)
        flat = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, dy, cache, model, grads):
        shape, arg = cache
        n, c, h, w = shape
        h2, w2 = h // 2, w // 2
        dflat = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(dflat, arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, : h2 * 2, : w2 * 2] = (
            dflat.reshape(n, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2 * 2, w2 * 2)
        )
        return dx


class _ReLU:
    def forward(self, x, model):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, model, grads):
        return dy * cache


class _Flatten:
    def forward(self, x, model):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, model, grads):
        return dy.reshape(cache)


def _plan(model: LayeredModel):
    if model.arch_id == "mlp-2":
        return (_Flatten(), _Dense(0, 1), _ReLU(), _Dense(2, 3))
    if model.arch_id == "lenet-s":
        return (
            _Conv2d(0, 1),
            _ReLU(),
            _MaxPool2(),
            _Conv2d(2, 3),
            _ReLU(),
            _MaxPool2(),
            _Flatten(),
            _Dense(4, 5),
            _ReLU(),
            _Dense(6, 7),
        )
    raise ValueError(f"unknown arch_id {model.arch_id!r}; known: {ARCH_IDS}")


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def forward(model: LayeredModel, batch: np.ndarray) -> np.ndarray:
    """Per-sample class logits for ``batch``; deterministic, no side effects."""
    x = np.asarray(batch, dtype=np.float64)
    for op in _plan(model):
        x, _ = op.forward(x, model)
    return x


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(np.mean(np.log(denom[:, 0]) - z[idx, labels]))
    d = e / denom
    d[idx, labels] -= 1.0
    d /= n
    return loss, d


def loss_and_gradients(model: LayeredModel, batch: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss plus one gradient array per model layer."""
    x = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape[0] != x.shape[0]:
        raise ValueError(
            f"batch has {x.shape[0]} samples but {labels.shape[0]} labels"
        )
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(
            f"labels must lie in [0, {model.num_classes}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )
    plan = _plan(model)
    caches = []
    for op in plan:
        x, cache = op.forward(x, model)
        caches.append(cache)
    loss, dy = softmax_cross_entropy(x, labels)
    grads: list = [None] * model.num_layers
    for op, cache in zip(reversed(plan), reversed(caches)):
        dy = op.backward(dy, cache, model, grads)
    return loss, grads


def zeros_velocity(model: LayeredModel) -> list[np.ndarray]:
    return [np.zeros_like(model.array(i)) for i in range(model.num_layers)]


def sgd_step(
    model: LayeredModel,
    grads: Sequence[np.ndarray],
    cfg: TrainingConfig,
    velocity: Sequence[np.ndarray],
    round_t: int,
):
    """One momentum-SGD step.

    Update order, per parameter tensor:
      v <- momentum * v + (grad + weight_decay * param)
      param <- param - lr * lr_decay_base**round_t * v

    Returns a new (model, velocity) pair; inputs are untouched.
    """
    lr = cfg.learning_rate * cfg.lr_decay_base**round_t
    new_layers = []
    new_velocity = []
    for i, layer in enumerate(model.layers):
        p = model.array(i)
        g = grads[i]
        if g.shape != p.shape:
            raise ShapeError(
                f"layer {i} ({layer.kind}): gradient shape {g.shape} does not "
                f"match parameter shape {p.shape}"
            )
        v = cfg.momentum * velocity[i] + (g + cfg.weight_decay * p)
        new_layers.append(Layer(layer.index, layer.kind, (p - lr * v,)))
        new_velocity.append(v)
    out = LayeredModel(model.arch_id, model.num_classes, model.input_shape, new_layers)
    return out, new_velocity


# ---------------------------------------------------------------------------
# Architecture construction
# ---------------------------------------------------------------------------


def _glorot(shape, fan_in, fan_out, seed, arch_id, layer_index):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    rng = rng_for(seed, arch_id, layer_index)
    return rng.uniform(-limit, limit, size=shape)


def _normalize_input_shape(input_shape) -> tuple[int, ...]:
    if isinstance(input_shape, int):
        return (input_shape,)
    shape = tuple(int(d) for d in input_shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"input shape must have positive dims, got {input_shape}")
    return shape


def build_arch(
    arch_id: str, num_classes: int, input_shape, seed: int = 0
) -> LayeredModel:
    """Deterministically initialized model.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)) drawn from a
    counter-based stream keyed by (seed, arch_id, layer_index); biases start
    at zero. Layer indices are assigned in forward order, one index per
    parameter tensor, so cut-layer boundaries are stable:

      mlp-2:   0 dense-w  1 bias  2 dense-w  3 bias
      lenet-s: 0 conv-w   1 bias  2 conv-w   3 bias
               4 dense-w  5 bias  6 dense-w  7 bias
    """
    shape = _normalize_input_shape(input_shape)
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")

    if arch_id == "mlp-2":
        d = int(np.prod(shape))
        dims = [(d, MLP_HIDDEN), (MLP_HIDDEN, num_classes)]
        layers = []
        for wi, (fin, fout) in zip((0, 2), dims):
            w = _glorot((fin, fout), fin, fout, seed, arch_id, wi)
            layers.append(Layer(wi, "dense", (w,)))
            layers.append(Layer(wi + 1, "bias", (np.zeros(fout),)))
        layers.sort(key=lambda l: l.index)
        return LayeredModel(arch_id, num_classes, shape, layers)

    if arch_id == "lenet-s":
        if len(shape) != 3:
            raise ShapeError(
                f"lenet-s expects a (channels, height, width) input, got {shape}"
            )
        c, h, w = shape
        k = LENET_KERNEL
        h1, w1 = (h - k + 1) // 2, (w - k + 1) // 2
        h2, w2 = (h1 - k + 1) // 2, (w1 - k + 1) // 2
        if h - k + 1 < 2 or w - k + 1 < 2 or h1 - k + 1 < 2 or w1 - k + 1 < 2:
            raise ShapeError(
                f"lenet-s needs at least 16x16 input for two conv+pool stages, "
                f"got {shape}"
            )
        flat = LENET_CH2 * h2 * w2
        layers = []
        conv_dims = [(LENET_CH1, c), (LENET_CH2, LENET_CH1)]
        for wi, (out_ch, in_ch) in zip((0, 2), conv_dims):
            fin, fout = in_ch * k * k, out_ch * k * k
            wgt = _glorot((out_ch, in_ch, k, k), fin, fout, seed, arch_id, wi)
            layers.append(Layer(wi, "conv2d", (wgt,)))
            layers.append(Layer(wi + 1, "bias", (np.zeros(out_ch),)))
        dense_dims = [(flat, LENET_HIDDEN), (LENET_HIDDEN, num_classes)]
        for wi, (fin, fout) in zip((4, 6), dense_dims):
            wgt = _glorot((fin, fout), fin, fout, seed, arch_id, wi)
            layers.append(Layer(wi, "dense", (wgt,)))
            layers.append(Layer(wi + 1, "bias", (np.zeros(fout),)))
        layers.sort(key=lambda l: l.index)
        return LayeredModel(arch_id, num_classes, shape, layers)

    raise ValueError(f"unknown arch_id {arch_id!r}; known: {ARCH_IDS}")


def default_cut_layer(arch_id: str) -> int:
    """First layer index of the classifier block (the dense head)."""
    if arch_id == "mlp-2":
        return 2
    if arch_id == "lenet-s":
        return 4
    raise ValueError(f"unknown arch_id {arch_id!r}; known: {ARCH_IDS}")


# ---------------------------------------------------------------------------
# Model plumbing
# ---------------------------------------------------------------------------


def clone_model(model: LayeredModel) -> LayeredModel:
    layers = [
        Layer(
            l.index,
            l.kind,
            None if l.params is None else tuple(np.array(a) for a in l.params),
        )
        for l in model.layers
    ]
    return LayeredModel(
        model.arch_id,
        model.num_classes,
        model.input_shape,
        layers,
        on_sentinel_access=model.on_sentinel_access,
    )


def congruent(a: LayeredModel, b: LayeredModel) -> bool:
    if a.arch_id != b.arch_id or a.num_layers != b.num_layers:
        return False
    return a.num_classes == b.num_classes and a.input_shape == b.input_shape


def flatten_model(model: LayeredModel) -> np.ndarray:
    """All parameters as one vector, concatenated in layer-index order."""
    return np.concatenate([model.array(i).ravel() for i in range(model.num_layers)])


def flatten_layers(model: LayeredModel, indices) -> np.ndarray:
    return np.concatenate([model.array(i).ravel() for i in indices])


def unflatten_model(template: LayeredModel, vec: np.ndarray) -> LayeredModel:
    """Inverse of :func:`flatten_model`, using ``template`` for shapes."""
    layers = []
    pos = 0
    for i, layer in enumerate(template.layers):
        shape = template.array(i).shape
        size = int(np.prod(shape))
        layers.append(Layer(layer.index, layer.kind, (vec[pos : pos + size].reshape(shape).copy(),)))
        pos += size
    if pos != vec.size:
        raise ShapeError(f"vector of size {vec.size} does not match model size {pos}")
    return LayeredModel(template.arch_id, template.num_classes, template.input_shape, layers)


def model_size(model: LayeredModel) -> int:
    return sum(model.array(i).size for i in range(model.num_layers))
