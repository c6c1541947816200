"""Feed-forward classifiers with manual backpropagation.

Supported layers: fully connected (``Dense``), inverted ``Dropout``,
valid-padded 2-D convolution (``Conv``, lowered with im2col) and ``Flatten``.
Every model ends with an implicit linear classifier to ``num_classes``
logits, so a spec with no layers is multinomial logistic regression.

Parameters are a flat list ``[W0, b0, W1, b1, ...]`` of float64 arrays, one
(W, b) pair per Dense/Conv layer followed by the classifier pair.
"""
from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Stream

ACTIVATIONS = ("relu", "tanh", "none")


class SpecError(ValueError):
    """Invalid or shape-incompatible model specification."""


class ShapeError(ValueError):
    """Batch does not match the model specification."""


@dataclass(frozen=True)
class Dense:
    width: int
    activation: str = "relu"


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Conv:
    kernel: int
    channels: int
    stride: int = 1
    activation: str = "relu"


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Dense | Dropout | Conv | Flatten

_LAYER_TYPES = {"dense": Dense, "dropout": Dropout, "conv": Conv, "flatten": Flatten}


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    num_classes: int
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        shape = self.input_shape
        if isinstance(shape, int):
            shape = (shape,)
        object.__setattr__(self, "input_shape", tuple(int(s) for s in shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        plan(self)  # validates

    @property
    def input_dim(self) -> int:
        return math.prod(self.input_shape)

    def with_width(self, width: int) -> "ModelSpec":
        """Copy with every Dense width and Conv channel count set to ``width``."""
        layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                layer = replace(layer, width=width)
            elif isinstance(layer, Conv):
                layer = replace(layer, channels=width)
            layers.append(layer)
        return replace(self, layers=tuple(layers))

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            kind = next(k for k, t in _LAYER_TYPES.items() if isinstance(layer, t))
            layers.append({"type": kind, **layer.__dict__})
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for entry in d.get("layers", []):
            entry = dict(entry)
            kind = entry.pop("type", None)
            if kind not in _LAYER_TYPES:
                raise SpecError(f"unknown layer type {kind!r}")
            try:
                layers.append(_LAYER_TYPES[kind](**entry))
            except TypeError as exc:
                raise SpecError(f"bad {kind} layer: {exc}") from None
        return cls(input_shape=tuple(d["input_shape"]), num_classes=int(d["num_classes"]), layers=tuple(layers))

    def digest(self) -> str:
        import json

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class _Op:
    kind: str
    param: int = -1  # index of W in the flat param list
    activation: str = "none"
    rate: float = 0.0
    kernel: int = 0
    stride: int = 1
    in_shape: tuple = ()
    out_shape: tuple = ()
    layer_index: int = 0


@functools.lru_cache(maxsize=256)
def plan(spec: ModelSpec) -> tuple[_Op, ...]:
    """Resolve a spec into shape-annotated ops; raises SpecError on mismatch."""
    if spec.num_classes < 2:
        raise SpecError("num_classes must be >= 2")
    if len(spec.input_shape) not in (1, 3) or min(spec.input_shape) < 1:
        raise SpecError(f"input_shape must be (dim,) or (h, w, c), got {spec.input_shape}")
    shape = spec.input_shape
    ops: list[_Op] = []
    n_param = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            if len(shape) != 1:
                raise SpecError(f"layer {i}: Dense after spatial output {shape}; add Flatten")
            if layer.width < 1 or layer.activation not in ACTIVATIONS:
                raise SpecError(f"layer {i}: bad Dense {layer}")
            ops.append(_Op("dense", n_param, layer.activation, in_shape=shape, out_shape=(layer.width,), layer_index=i))
            shape = (layer.width,)
            n_param += 2
        elif isinstance(layer, Dropout):
            if not 0.0 <= layer.rate < 1.0:
                raise SpecError(f"layer {i}: dropout rate must be in [0, 1)")
            ops.append(_Op("dropout", rate=float(layer.rate), in_shape=shape, out_shape=shape, layer_index=i))
        elif isinstance(layer, Conv):
            if len(shape) != 3:
                raise SpecError(f"layer {i}: Conv needs a (h, w, c) input, got {shape}")
            if layer.kernel < 1 or layer.stride < 1 or layer.channels < 1 or layer.activation not in ACTIVATIONS:
                raise SpecError(f"layer {i}: bad Conv {layer}")
            h, w, _ = shape
            if layer.kernel > h or layer.kernel > w:
                raise SpecError(f"layer {i}: kernel {layer.kernel} larger than input {shape}")
            ho = (h - layer.kernel) // layer.stride + 1
            wo = (w - layer.kernel) // layer.stride + 1
            out = (ho, wo, layer.channels)
            ops.append(
                _Op("conv", n_param, layer.activation, kernel=layer.kernel, stride=layer.stride,
                    in_shape=shape, out_shape=out, layer_index=i)
            )
            shape = out
            n_param += 2
        elif isinstance(layer, Flatten):
            out = (math.prod(shape),)
            ops.append(_Op("flatten", in_shape=shape, out_shape=out, layer_index=i))
            shape = out
        else:
            raise SpecError(f"layer {i}: unknown layer {layer!r}")
    if len(shape) != 1:
        out = (math.prod(shape),)
        ops.append(_Op("flatten", in_shape=shape, out_shape=out, layer_index=len(spec.layers)))
        shape = out
    ops.append(_Op("dense", n_param, "none", in_shape=shape, out_shape=(spec.num_classes,),
                   layer_index=len(spec.layers)))
    return tuple(ops)


def param_shapes(spec: ModelSpec) -> list[tuple]:
    shapes = []
    for op in plan(spec):
        if op.kind == "dense":
            shapes += [(op.in_shape[0], op.out_shape[0]), (op.out_shape[0],)]
        elif op.kind == "conv":
            shapes += [(op.kernel * op.kernel * op.in_shape[2], op.out_shape[2]), (op.out_shape[2],)]
    return shapes


def init_params(spec: ModelSpec, seed: int) -> list[np.ndarray]:
    """Glorot-uniform weights, zero biases, drawn from the pinned stream."""
    params = []
    for op in plan(spec):
        if op.kind == "dense":
            fan_in, fan_out = op.in_shape[0], op.out_shape[0]
            wshape = (fan_in, fan_out)
        elif op.kind == "conv":
            k2 = op.kernel * op.kernel
            fan_in, fan_out = k2 * op.in_shape[2], k2 * op.out_shape[2]
            wshape = (k2 * op.in_shape[2], op.out_shape[2])
        else:
            continue
        a = math.sqrt(6.0 / (fan_in + fan_out))
        u = Stream(seed, "init", op.layer_index).uniform(math.prod(wshape))
        params.append(((2.0 * u - 1.0) * a).reshape(wshape))
        params.append(np.zeros(wshape[1]))
    return params


def params_digest(params: Sequence[np.ndarray], *extra: float) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    for e in extra:
        h.update(np.float64(e).tobytes())
    return h.hexdigest()


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(g, pre, post, kind):
    if kind == "relu":
        return g * (pre > 0)
    if kind == "tanh":
        return g * (1.0 - post * post)
    return g


def _im2col(x, k, stride):
    # x: (n, h, w, c) -> (n, ho, wo, k*k*c) with (ki, kj, c) ordering
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: (n, ho, wo, c, k, k)
    n, ho, wo, c = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, ho, wo, k * k * c)


def _col2im(dcols, in_shape, k, stride):
    n, ho, wo, _ = dcols.shape
    h, w, c = in_shape
    d = dcols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros((n, h, w, c))
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += d[:, :, :, i, j, :]
    return dx


def dropout_mask(shape, rate, dropout_seed, step, layer_index) -> np.ndarray:
    """Inverted-dropout mask: 0 or 1/(1-rate), keyed by (seed, step, layer)."""
    if rate == 0.0:
        return np.ones(shape)
    u = Stream(dropout_seed, "dropout", step, layer_index).uniform(math.prod(shape)).reshape(shape)
    return (u >= rate) / (1.0 - rate)


def _check_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected inputs (batch, {spec.input_dim}), got {x.shape}")
    return x


def _forward(spec, params, x, mode, dropout_seed, step):
    x = _check_batch(spec, x)
    if len(spec.input_shape) == 3:
        x = x.reshape((x.shape[0],) + spec.input_shape)
    cache = []
    h = x
    for op in plan(spec):
        if op.kind == "dense":
            W, b = params[op.param], params[op.param + 1]
            pre = h @ W + b
            post = _act(pre, op.activation)
            cache.append((op, h, pre, post))
            h = post
        elif op.kind == "conv":
            W, b = params[op.param], params[op.param + 1]
            cols = _im2col(h, op.kernel, op.stride)
            pre = cols @ W + b
            post = _act(pre, op.activation)
            cache.append((op, cols, pre, post))
            h = post
        elif op.kind == "dropout":
            if mode == "train" and op.rate > 0.0:
                mask = dropout_mask(h.shape, op.rate, dropout_seed, step, op.layer_index)
                h = h * mask
            else:
                mask = None
            cache.append((op, mask, None, None))
        elif op.kind == "flatten":
            cache.append((op, None, None, None))
            h = h.reshape(h.shape[0], -1)
    return h, cache


def forward(spec: ModelSpec, params, x, mode: str = "eval", dropout_seed: int = 0, step: int = 0) -> np.ndarray:
    """Logits for a batch of flat inputs ``x`` of shape (batch, input_dim)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, _ = _forward(spec, params, x, mode, dropout_seed, step)
    return logits


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_xent(logits, labels, temperature: float = 1.0):
    """Mean cross-entropy (nats) of ``softmax(logits / temperature)`` and the probs."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError("logits and labels disagree on batch size")
    logp = log_softmax(logits / temperature)
    nll = -logp[np.arange(labels.shape[0]), labels]
    return float(np.mean(nll)), np.exp(logp)


def backward(spec: ModelSpec, params, x, labels, temperature: float = 1.0, mode: str = "train",
             dropout_seed: int = 0, step: int = 0):
    """Mean loss and exact gradients w.r.t. every parameter array."""
    labels = np.asarray(labels, dtype=np.int64)
    logits, cache = _forward(spec, params, x, mode, dropout_seed, step)
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError("inputs and labels disagree on batch size")
    loss, probs = softmax_xent(logits, labels, temperature)
    n = labels.shape[0]
    g = probs
    g[np.arange(n), labels] -= 1.0
    g /= n * temperature
    grads: list = [None] * len(params)
    for op, a, pre, post in reversed(cache):
        if op.kind == "dense":
            g = _act_grad(g, pre, post, op.activation)
            grads[op.param] = a.T @ g
            grads[op.param + 1] = g.sum(axis=0)
            g = g @ params[op.param].T
        elif op.kind == "conv":
            g = _act_grad(g, pre, post, op.activation)
            gf = g.reshape(-1, g.shape[-1])
            grads[op.param] = a.reshape(-1, a.shape[-1]).T @ gf
            grads[op.param + 1] = gf.sum(axis=0)
            dcols = g @ params[op.param].T
            g = _col2im(dcols, op.in_shape, op.kernel, op.stride)
        elif op.kind == "dropout":
            if a is not None:
                g = g * a
        elif op.kind == "flatten":
            g = g.reshape((g.shape[0],) + op.in_shape)
    return loss, grads
