"""A small supervised-training stack for convolutional-recurrent classifiers.

Layers operate on batched ``(N, H, W, C)`` float arrays. Recurrent layers are
the same functions as in :mod:`srnnkit.layers`; the blocks defined here are
"same"-padded convolution, global average pooling, a fully-connected
classifier and softmax cross-entropy. Optimization is plain mini-batch SGD
with momentum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._arith import add_bias, linear, linear_transpose, outer_sum
from .layers import LayerKind, check_channels, get_layer, register_layer
from .params import ACTIVATIONS, Params, SrnnParams, activate, activation_grad
from .tensor import ImageTensor, ShapeError, dtype_of

log = logging.getLogger(__name__)


# -- convolution -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConvParams(Params):
    """``weight`` is ``(C_out, k, k, C_in)``; ``bias`` may be ``None``."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    activation: str = "identity"

    def __post_init__(self):
        self.freeze_fields()
        w = self.weight
        if w.ndim != 4 or w.shape[1] != w.shape[2] or w.shape[1] % 2 == 0:
            raise ShapeError(f"conv weight must be (C_out, k, k, C_in) with odd k, got {w.shape}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ShapeError(f"conv bias must be ({w.shape[0]},), got {self.bias.shape}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, c_in, c_out, k, rng, stride=1, activation="relu", bias=True, dtype=np.float64):
        std = math.sqrt(2.0 / (k * k * c_in))
        weight = rng.normal(0.0, std, (c_out, k, k, c_in)).astype(dtype)
        return cls(weight, np.zeros(c_out, dtype) if bias else None, stride, activation)


def _patches(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """im2col: ``(..., Ho, Wo, k*k*C)`` windows over a zero-padded input."""
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(p, p), (p, p), (0, 0)]
    xp = np.pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(-3, -2))
    win = win[..., ::stride, ::stride, :, :, :]  # (..., Ho, Wo, C, k, k)
    win = np.moveaxis(win, -3, -1)  # (..., Ho, Wo, k, k, C)
    return np.ascontiguousarray(win).reshape(win.shape[:-3] + (-1,))


def conv2d_forward(p: ConvParams, x: np.ndarray):
    check_channels(p.in_channels, x.shape[-1], "conv2d")
    x = np.ascontiguousarray(x, dtype=np.result_type(x.dtype, p.dtype))
    cols = _patches(x, p.kernel, p.stride)
    w = p.weight.astype(x.dtype).reshape(p.out_channels, -1)
    z = linear(cols, w)
    if p.bias is not None:
        z = add_bias(z, p.bias.astype(x.dtype))
    h = activate(z, p.activation)
    return h, (x.shape, cols, z, h)


def conv2d_backward(p: ConvParams, state, dy: np.ndarray):
    x_shape, cols, z, h = state
    k, s = p.kernel, p.stride
    dz = dy * activation_grad(z, h, p.activation)
    w = p.weight.astype(z.dtype).reshape(p.out_channels, -1)
    grads = {"weight": outer_sum(dz, cols).reshape(p.weight.shape)}
    if p.bias is not None:
        grads["bias"] = dz.reshape(-1, p.out_channels).sum(axis=0)

    dcols = linear_transpose(dz, w).reshape(dz.shape[:-1] + (k, k, p.in_channels))
    pad = k // 2
    H, W = x_shape[-3], x_shape[-2]
    ho, wo = dz.shape[-3], dz.shape[-2]
    dxp = np.zeros(x_shape[:-3] + (H + 2 * pad, W + 2 * pad, x_shape[-1]), z.dtype)
    for a in range(k):
        for b in range(k):
            dxp[..., a : a + s * ho : s, b : b + s * wo : s, :] += dcols[..., a, b, :]
    return dxp[..., pad : pad + H, pad : pad + W, :], grads


register_layer(LayerKind("conv2d", conv2d_forward, conv2d_backward, lambda p: p.in_channels))


# -- pooling, classifier, loss ----------------------------------------------

@dataclass(frozen=True, eq=False)
class FcParams(Params):
    weight: np.ndarray  # (C_out, C_in)
    bias: np.ndarray

    def __post_init__(self):
        self.freeze_fields()
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"fc weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, c_in, c_out, rng, dtype=np.float64):
        a = 1 / math.sqrt(c_in)
        return cls(rng.uniform(-a, a, (c_out, c_in)).astype(dtype), np.zeros(c_out, dtype))


def fc_forward(p: FcParams, x: np.ndarray):
    check_channels(p.in_channels, x.shape[-1], "fc")
    x = np.asarray(x, dtype=np.result_type(x.dtype, p.dtype))
    return add_bias(linear(x, p.weight.astype(x.dtype)), p.bias.astype(x.dtype)), x


def fc_backward(p: FcParams, x, dy):
    grads = {"weight": outer_sum(dy, x), "bias": dy.reshape(-1, p.out_channels).sum(axis=0)}
    return linear_transpose(dy, p.weight.astype(dy.dtype)), grads


register_layer(LayerKind("fc", fc_forward, fc_backward, lambda p: p.in_channels, ndim=1))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(-3, -2))


def global_avg_pool_backward(x_shape, dy: np.ndarray) -> np.ndarray:
    h, w = x_shape[-3], x_shape[-2]
    return np.broadcast_to(dy[..., None, None, :] / (h * w), x_shape).copy()


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


# -- model description ------------------------------------------------------

LAYER_TYPES = ("conv", "srnn", "sws_birnn", "gap", "fc")


@dataclass(frozen=True)
class LayerConfig:
    type: str
    kernel: int = 0
    mid: int = 0
    out: int = 0
    stride: int = 1
    activation: str = "identity"

    def describe(self) -> str:
        if self.type == "conv":
            return f"conv:{self.kernel}:{self.out}:{self.stride}:{self.activation}"
        if self.type in ("srnn", "sws_birnn"):
            return f"{self.type}:{self.mid}:{self.out}:{self.activation}"
        return self.type


@dataclass(frozen=True)
class ModelConfig:
    """Layer stack plus input shape and class count.

    Layer strings: ``conv:k:C_out:stride:act``, ``sws_birnn:C_mid:C_out:act``,
    ``srnn:C_mid:C_out:act``, ``gap`` and the classifier ``fc`` (width = classes).
    """

    layers: tuple[LayerConfig, ...]
    input_shape: tuple[int, int, int]
    classes: int

    def __post_init__(self):
        self.shapes()

    @classmethod
    def parse_layers(cls, spec: str, input_shape, classes: int) -> ModelConfig:
        layers = []
        for i, item in enumerate(t.strip() for t in spec.replace(";", ",").split(",")):
            if not item:
                continue
            parts = item.split(":")
            kind = parts[0]
            try:
                if kind == "conv":
                    k, out, stride = int(parts[1]), int(parts[2]), int(parts[3]) if len(parts) > 3 else 1
                    act = parts[4] if len(parts) > 4 else "relu"
                    layers.append(LayerConfig("conv", kernel=k, out=out, stride=stride, activation=act))
                elif kind in ("srnn", "sws_birnn"):
                    act = parts[3] if len(parts) > 3 else "tanh"
                    layers.append(LayerConfig(kind, mid=int(parts[1]), out=int(parts[2]), activation=act))
                elif kind in ("gap", "fc") and len(parts) == 1:
                    layers.append(LayerConfig(kind, out=classes if kind == "fc" else 0))
                else:
                    raise ValueError(f"layer {i}: unknown layer {item!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"layer {i}: cannot parse {item!r}: {exc}") from None
        return cls(tuple(layers), tuple(input_shape), classes)

    @classmethod
    def from_file(cls, path) -> ModelConfig:
        kv = read_key_values(path)
        try:
            shape = tuple(int(v) for v in kv["input"].split(","))
            return cls.parse_layers(kv["layers"], shape, int(kv["classes"]))
        except KeyError as exc:
            raise ValueError(f"{path}: missing key {exc}") from None

    def to_text(self) -> str:
        h, w, c = self.input_shape
        layers = ",".join(l.describe() for l in self.layers)
        return f"input={h},{w},{c}\nclasses={self.classes}\nlayers={layers}\n"

    def shapes(self) -> list[tuple]:
        """Input shape of every layer plus the final output shape; validates the chain."""
        shape = tuple(self.input_shape)
        out = [shape]
        if not self.layers or self.layers[-1].type != "fc":
            raise ShapeError("model must end with exactly one fc classifier")
        for i, layer in enumerate(self.layers):
            if layer.type == "fc":
                if i != len(self.layers) - 1:
                    raise ShapeError(f"layer {i}: fc is only allowed as the final classifier")
                if len(shape) != 1:
                    raise ShapeError(f"layer {i}: fc needs a pooled vector input, got {shape}")
                shape = (self.classes,)
            elif len(shape) != 3:
                raise ShapeError(f"layer {i}: {layer.type} needs a spatial input, got {shape}")
            elif layer.type == "conv":
                if layer.kernel % 2 == 0 or layer.stride not in (1, 2):
                    raise ShapeError(f"layer {i}: conv needs odd kernel and stride 1 or 2")
                h, w, _ = shape
                shape = (-(-h // layer.stride), -(-w // layer.stride), layer.out)
            elif layer.type in ("srnn", "sws_birnn"):
                shape = (shape[0], shape[1], layer.out)
            elif layer.type == "gap":
                shape = (shape[2],)
            out.append(shape)
        return out

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> list:
        params = []
        for layer, shape in zip(self.layers, self.shapes()):
            c_in = shape[-1]
            if layer.type == "conv":
                params.append(
                    ConvParams.init(c_in, layer.out, layer.kernel, rng, layer.stride, layer.activation, dtype=dtype)
                )
            elif layer.type in ("srnn", "sws_birnn"):
                params.append(SrnnParams.init(c_in, layer.mid, layer.out, rng, layer.activation, dtype))
            elif layer.type == "fc":
                params.append(FcParams.init(c_in, self.classes, rng, dtype))
            else:
                params.append(None)
        return params


_KIND = {"conv": "conv2d", "srnn": "srnn", "sws_birnn": "sws_birnn", "fc": "fc"}


def model_forward(model: ModelConfig, params: list, x: np.ndarray):
    """Batched forward ``(N, H, W, C) -> (N, classes)``; returns logits and per-layer caches."""
    caches = []
    for layer, p in zip(model.layers, params):
        if layer.type == "gap":
            caches.append(x.shape)
            x = global_avg_pool(x)
        else:
            y, state = get_layer(_KIND[layer.type]).forward(p, x)
            caches.append(state)
            x = y
    return x, caches


def model_backward(model: ModelConfig, params: list, caches: list, d_logits: np.ndarray):
    grads = [None] * len(params)
    d = d_logits
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        if layer.type == "gap":
            d = global_avg_pool_backward(caches[i], d)
        else:
            d, grads[i] = get_layer(_KIND[layer.type]).backward(params[i], caches[i], d)
    return grads, d


# -- data --------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledImage:
    image: ImageTensor
    label: int


def stack(data: list[LabeledImage], dtype=None):
    x = np.stack([d.image.data for d in data])
    if dtype is not None:
        x = x.astype(dtype, copy=False)
    return x, np.array([d.label for d in data], dtype=np.int64)


def make_synthetic_dataset(n: int, seed: int, size: int = 16) -> list[LabeledImage]:
    """Balanced horizontal-bar (label 0) vs vertical-bar (label 1) images.

    Each image has one bar of random position, thickness 1-3 and contrast
    0.5-1.0 on a zero background, plus Gaussian noise with sigma 0.1.
    """
    if n < 2:
        raise ValueError("need at least two images for a balanced dataset")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    out = []
    for label in labels:
        img = np.zeros((size, size), dtype=np.float64)
        thick = int(rng.integers(1, 4))
        start = int(rng.integers(0, size - thick + 1))
        contrast = rng.uniform(0.5, 1.0)
        if label == 0:
            img[start : start + thick, :] = contrast
        else:
            img[:, start : start + thick] = contrast
        img += rng.normal(0.0, 0.1, img.shape)
        out.append(LabeledImage(ImageTensor(img[:, :, None].astype(np.float32)), int(label)))
    return out


def bar_orientation_score(images: list[LabeledImage]) -> float:
    """Variance of row means minus variance of column means, averaged over images.

    Positive for horizontal bars, negative for vertical ones.
    """
    scores = []
    for item in images:
        img = item.image.data[:, :, 0].astype(np.float64)
        scores.append(img.mean(axis=1).var() - img.mean(axis=0).var())
    return float(np.mean(scores))


CIFAR_VARIANTS = {"cifar10": (1, 10), "cifar100": (2, 100)}
_CIFAR_PIXELS = 3072


def load_cifar(path, variant: str = "cifar10", limit: int | None = None) -> list[LabeledImage]:
    """Parse a CIFAR binary batch file into ``32x32x3`` images scaled to [0, 1].

    CIFAR-100 records carry a coarse and a fine label byte; the fine label is kept.
    """
    if variant not in CIFAR_VARIANTS:
        raise ValueError(f"variant must be one of {sorted(CIFAR_VARIANTS)}")
    label_bytes, n_classes = CIFAR_VARIANTS[variant]
    record = label_bytes + _CIFAR_PIXELS
    raw = Path(path).read_bytes()
    if len(raw) % record:
        raise ValueError(
            f"{path}: truncated record at byte {len(raw) - len(raw) % record} "
            f"(file size {len(raw)} is not a multiple of {record})"
        )
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    if limit is not None:
        recs = recs[:limit]
    labels = recs[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise ValueError(f"{path}: record {int(bad[0])} has label {int(labels[bad[0]])} >= {n_classes}")
    pixels = recs[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    pixels = (pixels.astype(np.float32) / np.float32(255.0))
    return [LabeledImage(ImageTensor(img), int(lab)) for img, lab in zip(pixels, labels)]


def write_cifar(path, images: np.ndarray, labels, variant: str = "cifar10", coarse=None) -> None:
    """Write uint8 ``(N, 32, 32, 3)`` images in CIFAR binary layout."""
    label_bytes, _ = CIFAR_VARIANTS[variant]
    images = np.asarray(images, dtype=np.uint8)
    n = images.shape[0]
    out = np.empty((n, label_bytes + _CIFAR_PIXELS), dtype=np.uint8)
    out[:, label_bytes - 1] = labels
    if label_bytes == 2:
        out[:, 0] = 0 if coarse is None else coarse
    out[:, label_bytes:] = images.transpose(0, 3, 1, 2).reshape(n, -1)
    Path(path).write_bytes(out.tobytes())


# -- training -----------------------------------------------------------------

def read_key_values(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    seed: int = 1
    precision: str = "single"
    holdout: float = 0.2

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not 0 <= self.holdout < 1:
            raise ValueError("holdout fraction must be in [0, 1)")
        dtype_of(self.precision)

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        kv = read_key_values(path)
        types = {f: t for f, t in cls.__annotations__.items()}
        kwargs = {}
        for key, value in kv.items():
            if key not in types:
                raise ValueError(f"{path}: unknown train option {key!r}")
            kwargs[key] = {"float": float, "int": int, "str": str}[types[key]](value)
        return cls(**kwargs)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    params: list
    initial_params: list
    history: list[EpochMetrics] = field(default_factory=list)

    def metrics_csv(self) -> str:
        rows = ["epoch,loss,accuracy"]
        rows += [f"{m.epoch},{m.loss!r},{m.accuracy!r}" for m in self.history]
        return "\n".join(rows) + "\n"


def split_holdout(data: list, fraction: float, seed: int):
    if fraction == 0:
        return list(data), []
    order = np.random.default_rng(seed).permutation(len(data))
    n_hold = max(1, int(round(fraction * len(data))))
    return [data[i] for i in order[n_hold:]], [data[i] for i in order[:n_hold]]


def train(model: ModelConfig, data: list[LabeledImage], cfg: TrainConfig, params: list | None = None) -> TrainResult:
    """Mini-batch SGD with momentum on mean cross-entropy.

    A fraction ``cfg.holdout`` of ``data`` is held out (seeded split) and
    scored after each epoch. The run is deterministic for a fixed seed.
    """
    if not data:
        raise ValueError("training data is empty")
    dtype = dtype_of(cfg.precision)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = model.init_params(rng, dtype)
    params = [None if p is None else p.astype(dtype) for p in params]
    result = TrainResult(params, list(params))
    train_set, held_out = split_holdout(data, cfg.holdout, cfg.seed)
    x_all, y_all = stack(train_set, dtype)
    velocity = [None if p is None else {k: np.zeros_like(v) for k, v in p.named_arrays().items()} for p in params]
    lr, mu = dtype(cfg.lr), dtype(cfg.momentum)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            logits, caches = model_forward(model, params, x_all[idx])
            loss, d_logits = softmax_cross_entropy(logits, y_all[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads, _ = model_backward(model, params, caches, d_logits.astype(dtype))
            for i, p in enumerate(params):
                if p is None:
                    continue
                arrays = p.named_arrays()
                updated = {}
                for key, value in arrays.items():
                    v = velocity[i][key] = mu * velocity[i][key] + grads[i][key]
                    updated[key] = value - lr * v
                params[i] = p.with_arrays(updated)
            total += loss * len(idx)
            seen += len(idx)
        acc = evaluate(model, params, held_out)[0] if held_out else float("nan")
        result.history.append(EpochMetrics(epoch, total / seen, acc))
        log.info("epoch %d loss %.6f held-out accuracy %.4f", epoch, total / seen, acc)
    result.params = params
    return result


def predict(model: ModelConfig, params: list, data: list[LabeledImage], batch_size: int = 256) -> np.ndarray:
    dtype = next(p.dtype for p in params if p is not None)
    preds = []
    for start in range(0, len(data), batch_size):
        x, _ = stack(data[start : start + batch_size], dtype)
        logits, _ = model_forward(model, params, x)
        preds.append(np.argmax(logits, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: ModelConfig, params: list, data: list[LabeledImage]):
    """Return ``(accuracy, confusion)`` where ``confusion[true, predicted]`` counts examples."""
    confusion = np.zeros((model.classes, model.classes), dtype=np.int64)
    if not data:
        return float("nan"), confusion
    preds = predict(model, params, data)
    labels = np.array([d.label for d in data])
    np.add.at(confusion, (labels, preds), 1)
    return float(np.trace(confusion) / len(data)), confusion
