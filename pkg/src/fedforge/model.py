"""Toy classifiers (mlp, cnn) over a flat parameter vector.

A model's parameters live in one contiguous float64 vector (the unit that
clients exchange and servers aggregate).  Layers are views into it, laid out
layer by layer in the order given by :func:`layer_table`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod, sqrt

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ARCHITECTURES = ("mlp", "cnn")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple  # (H, W, C)
    classes: int
    hidden: int = 64

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (H, W, C) with positive dims, got {self.input_shape}")
        if self.classes < 2:
            raise ValueError("a classifier needs at least 2 classes")
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")
        if self.arch == "cnn" and min(self.input_shape[:2]) < 2:
            raise ValueError("cnn needs H, W >= 2 for pooling")


def layer_table(spec):
    """Ordered (name, shape, offset) entries describing the flat layout."""
    h, w, c = spec.input_shape
    if spec.arch == "mlp":
        shapes = [
            ("dense1.w", (h * w * c, spec.hidden)),
            ("dense1.b", (spec.hidden,)),
            ("dense2.w", (spec.hidden, spec.classes)),
            ("dense2.b", (spec.classes,)),
        ]
    else:
        pooled = (h // 2) * (w // 2) * spec.hidden
        shapes = [
            ("conv.w", (3, 3, c, spec.hidden)),
            ("conv.b", (spec.hidden,)),
            ("dense.w", (pooled, spec.classes)),
            ("dense.b", (spec.classes,)),
        ]
    table, offset = [], 0
    for name, shape in shapes:
        table.append((name, shape, offset))
        offset += prod(shape)
    return table


def param_count(spec):
    name, shape, offset = layer_table(spec)[-1]
    return offset + prod(shape)


@dataclass
class Model:
    spec: ModelSpec
    params: np.ndarray
    offsets: list = field(init=False, repr=False)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        expected = param_count(self.spec)
        if self.params.shape != (expected,):
            raise ShapeError("model params", (expected,), self.params.shape)
        self.offsets = layer_table(self.spec)

    def unflatten(self):
        return {name: self.params[off:off + prod(shape)].reshape(shape)
                for name, shape, off in self.offsets}

    def copy(self):
        return Model(self.spec, self.params.copy())

    def with_params(self, params):
        return Model(self.spec, params)


def flatten(layers, spec):
    return np.concatenate([np.asarray(layers[name], dtype=np.float64).ravel()
                           for name, _, _ in layer_table(spec)])


def init_model(spec, rng):
    """Glorot-uniform weights, zero biases."""
    layers = {}
    for name, shape, _ in layer_table(spec):
        if name.endswith(".b"):
            layers[name] = np.zeros(shape)
            continue
        if len(shape) == 4:
            fan_in, fan_out = 9 * shape[2], 9 * shape[3]
        else:
            fan_in, fan_out = shape
        s = sqrt(6.0 / (fan_in + fan_out))
        layers[name] = rng.uniform(-s, s, size=shape)
    return Model(spec, flatten(layers, spec))


def _check_batch(spec, x):
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError("input batch", ("B",) + spec.input_shape, x.shape)


def _graph(spec, x, p):
    n = x.shape[0]
    if spec.arch == "mlp":
        flat = ad.reshape(x, (n, -1))
        hidden = ad.relu(flat @ p["dense1.w"] + p["dense1.b"])
        return hidden @ p["dense2.w"] + p["dense2.b"]
    feat = ad.avgpool2(ad.relu(ad.conv3x3(x, p["conv.w"], p["conv.b"])))
    return ad.reshape(feat, (n, -1)) @ p["dense.w"] + p["dense.b"]


def forward(model, batch):
    """Logits (B, classes) as a numpy array."""
    x = np.asarray(batch, dtype=np.float64)
    _check_batch(model.spec, x)
    p = {k: Tensor(v) for k, v in model.unflatten().items()}
    return _graph(model.spec, Tensor(x), p).data


def predict(model, images, chunk=512):
    out = [forward(model, images[i:i + chunk]).argmax(axis=1)
           for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def loss_and_grads(model, batch, labels, wrt="params", trigger=None):
    """Mean cross-entropy and its gradient.

    ``wrt="params"`` returns a gradient vector aligned with ``model.params``.
    ``wrt="trigger"`` stamps ``trigger`` onto the batch inside the graph and
    returns the gradient with respect to its pattern (zero off the mask).
    """
    x = np.asarray(batch, dtype=np.float64)
    _check_batch(model.spec, x)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeError("labels", (x.shape[0],), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= model.spec.classes):
        raise ValueError(f"labels must lie in [0, {model.spec.classes})")

    if wrt == "params":
        p = {k: Tensor(v, requires_grad=True) for k, v in model.unflatten().items()}
        inp = Tensor(x)
    elif wrt == "trigger":
        if trigger is None:
            raise ValueError("wrt='trigger' needs a trigger")
        p = {k: Tensor(v) for k, v in model.unflatten().items()}
        pattern = Tensor(trigger.pattern, requires_grad=True)
        inp = ad.blend(Tensor(x), Tensor(trigger.mask), pattern)
    else:
        raise ValueError(f"wrt must be 'params' or 'trigger', got {wrt!r}")

    loss, per_sample = ad.cross_entropy(_graph(model.spec, inp, p), labels)
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise ad.NonFiniteError(f"non-finite loss at batch index {int(bad[0])}")
    loss.backward()

    if wrt == "trigger":
        return float(loss.data), pattern.grad
    return float(loss.data), flatten({k: t.grad for k, t in p.items()}, model.spec)


def sgd_step(model, grad, lr):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape:
        raise ShapeError("gradient", model.params.shape, grad.shape)
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return model.with_params(model.params - lr * grad)


CKPT_MAGIC = "FFCKPT1"


def save_checkpoint(model, path):
    from .fileio import atomic_write

    h, w, c = model.spec.input_shape
    s = model.spec
    header = f"{CKPT_MAGIC} {s.arch} {h} {w} {c} {s.classes} {s.hidden}\n".encode()
    atomic_write(path, header + model.params.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        body = fh.read()
    if len(header) != 7 or header[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a {CKPT_MAGIC} checkpoint")
    h, w, c, classes, hidden = (int(v) for v in header[2:])
    spec = ModelSpec(header[1], (h, w, c), classes, hidden)
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if params.size != param_count(spec):
        raise ValueError(f"{path}: expected {param_count(spec)} params, found {params.size}")
    return Model(spec, params)
