"""A small layer zoo with hand-written backward passes, Adam, a step LR schedule
and a binary checkpoint format.

Every layer works on a whole batch. ``forward(x, mode)`` accepts three modes:

``"train"``
    batch statistics in BN, running statistics updated, activations cached.
``"infer"``
    running statistics in BN, nothing cached.
``"frozen"``
    BN reuses the statistics of the most recent ``"train"`` call as constants;
    activations cached. This makes per-sample losses independent of the rest
    of the batch, which the rotation module relies on.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, RegistryError, ShapeError, StateError
from .tensor_core import conv2d_backward, conv_output_size, im2col, kernel_matrix, read_tensor, write_tensor

MODES = ("train", "infer", "frozen")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, *, frozen_stats: bool = False,
                 param_grads: bool = True) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a cached forward")
        return self._cache

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 1, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.k, self.stride, self.padding = kernel, stride, padding
        fan_in = in_ch * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        self.params["weight"] = rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel))
        if bias:
            self.params["bias"] = np.zeros(out_ch)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} input channels, got shape {in_shape}")
        if self.k > h + 2 * self.padding or self.k > w + 2 * self.padding:
            raise ShapeError(f"conv kernel {self.k} larger than padded input {in_shape}")
        return (self.out_ch, conv_output_size(h, self.k, self.stride, self.padding),
                conv_output_size(w, self.k, self.stride, self.padding))

    def forward(self, x, mode="train"):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expects (N,{self.in_ch},H,W), got {x.shape}")
        w = self.params["weight"]
        cols, ho, wo = im2col(x, self.k, self.k, self.stride, self.padding)
        out = cols @ kernel_matrix(w).T
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = (x.shape, cols) if mode != "infer" else None
        return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, self.out_ch).transpose(0, 3, 1, 2))

    def backward(self, dy, *, frozen_stats=False, param_grads=True):
        x_shape, cols = self._need_cache()
        dx, dw, db = conv2d_backward(dy, x_shape, cols, self.params["weight"],
                                     self.stride, self.padding, need_weight=param_grads)
        if param_grads:
            self.grads["weight"] = dw
            if "bias" in self.params:
                self.grads["bias"] = db
        return dx

    def __repr__(self):
        return f"Conv2d({self.in_ch}, {self.out_ch}, k={self.k}, s={self.stride}, p={self.padding})"


class BatchNorm(Layer):
    """Per-channel batch normalisation over every axis except axis 1."""

    kind = "batch_norm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self._batch_stats = None

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"batch_norm expects {self.channels} channels, got shape {in_shape}")
        return in_shape

    def _bshape(self, x):
        return (1, self.channels) + (1,) * (x.ndim - 2)

    def forward(self, x, mode="train"):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"batch_norm expects {self.channels} channels, got {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        if mode == "train":
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // self.channels
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            unbiased = var * count / max(count - 1, 1)
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
            self._batch_stats = (mean, var)
        elif mode == "frozen":
            if self._batch_stats is None:
                raise StateError("batch_norm: 'frozen' mode needs a prior 'train' forward")
            mean, var = self._batch_stats
        elif mode == "infer":
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        bs = self._bshape(x)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        self._cache = None if mode == "infer" else (xhat, inv_std, axes, mode)
        return self.params["gamma"].reshape(bs) * xhat + self.params["beta"].reshape(bs)

    def backward(self, dy, *, frozen_stats=False, param_grads=True):
        xhat, inv_std, axes, mode = self._need_cache()
        bs = self._bshape(dy)
        gamma = self.params["gamma"].reshape(bs)
        if param_grads:
            self.grads["gamma"] = (dy * xhat).sum(axis=axes)
            self.grads["beta"] = dy.sum(axis=axes)
        if frozen_stats or mode == "frozen":
            return dy * gamma * inv_std.reshape(bs)
        count = dy.size // self.channels
        dxhat = dy * gamma
        s1 = dxhat.sum(axis=axes).reshape(bs)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bs)
        return inv_std.reshape(bs) * (dxhat - s1 / count - xhat * s2 / count)

    def __repr__(self):
        return f"BatchNorm({self.channels})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode="train"):
        self._cache = (x > 0) if mode != "infer" else None
        return np.maximum(x, 0.0)

    def backward(self, dy, *, frozen_stats=False, param_grads=True):
        return dy * self._need_cache()


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, mode="train"):
        y = sigmoid(x)
        self._cache = y if mode != "infer" else None
        return y

    def backward(self, dy, *, frozen_stats=False, param_grads=True):
        y = self._need_cache()
        return dy * y * (1.0 - y)


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, mode="train"):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects (N,C,H,W), got {x.shape}")
        self._cache = x.shape if mode != "infer" else None
        return x.mean(axis=(2, 3))

    def backward(self, dy, *, frozen_stats=False, param_grads=True):
        n, c, h, w = self._need_cache()
        return np.broadcast_to(dy[:, :, None, None] / (h * w), (n, c, h, w)).copy()


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, mode="train"):
        self._cache = x.shape if mode != "infer" else None
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, *, frozen_stats=False, param_grads=True):
        return dy.reshape(self._need_cache())


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / math.sqrt(in_features)
        self.params["weight"] = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.params["bias"] = np.zeros(out_features)

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"linear expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x, mode="train"):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (N,{self.in_features}), got {x.shape}")
        self._cache = x if mode != "infer" else None
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy, *, frozen_stats=False, param_grads=True):
        x = self._need_cache()
        if param_grads:
            self.grads["weight"] = dy.T @ x
            self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


class Sequential:
    """Ordered layer stack with a ``"<index>.<param>"`` parameter registry.

    ``in_shape`` is the per-sample input shape; when given, every layer's
    output shape is checked against its successor at construction.
    """

    def __init__(self, layers: list[Layer] | None = None, in_shape: tuple | None = None):
        self.layers = list(layers or [])
        self.in_shape = tuple(in_shape) if in_shape is not None else None
        self.out_shape = self.in_shape
        if self.in_shape is not None:
            shape = self.in_shape
            for i, layer in enumerate(self.layers):
                try:
                    shape = layer.out_shape(shape)
                except ShapeError as e:
                    raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
            self.out_shape = shape
        self.evaluations = 0
        self.layer_evaluations = 0
        self._cached = False

    def __len__(self):
        return len(self.layers)

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        if self.in_shape is not None and tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(f"layer 0: expected per-sample shape {self.in_shape}, got {x.shape[1:]}")
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, mode)
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({layer.kind}): {e}") from None
        self.evaluations += 1
        self.layer_evaluations += len(self.layers)
        self._cached = mode != "infer"
        return x

    __call__ = forward

    def backward(self, dy: np.ndarray, *, frozen_stats: bool = False,
                 param_grads: bool = True) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Reverse pass over the cached forward; returns ``(input_grad, param_grads)``."""
        if not self._cached:
            raise StateError("backward called without a cached train-mode forward")
        for layer in reversed(self.layers):
            dy = layer.backward(dy, frozen_stats=frozen_stats, param_grads=param_grads)
        return dy, (self.grads() if param_grads else {})

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, layer in enumerate(self.layers):
            for k, v in list(layer.params.items()) + list(layer.buffers.items()):
                state[f"{i}.{k}"] = v.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for k in store:
                    key = f"{i}.{k}"
                    if key not in state:
                        raise RegistryError(f"state is missing {key!r}")
                    if state[key].shape != store[k].shape:
                        raise ShapeError(f"{key}: shape {state[key].shape} != {store[k].shape}")
                    # in place, so optimisers holding references stay valid
                    store[k][...] = state[key]

    def zero_cache(self):
        for layer in self.layers:
            layer._cache = None
        self._cached = False

    def __repr__(self):
        inner = ", ".join(repr(l) for l in self.layers)
        return f"Sequential([{inner}])"


def conv_bn_relu(in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1,
                 kernel: int = 3, relu: bool = True) -> list[Layer]:
    """conv (no bias, BN follows) + BN (+ ReLU)."""
    layers: list[Layer] = [Conv2d(in_ch, out_ch, kernel, stride, kernel // 2, bias=False, rng=rng),
                           BatchNorm(out_ch)]
    if relu:
        layers.append(ReLU())
    return layers


def prefixed(prefix: str, registry: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in registry.items()}


# -- losses -----------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / N``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k - 1}], got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


# -- optimisation -------------------------------------------------------------

@dataclass(frozen=True)
class StepLr:
    """``lr(epoch) = base_lr * gamma ** (epoch // step_epochs)``."""

    base_lr: float = 1e-4
    step_epochs: int = 5
    gamma: float = 0.1

    def __post_init__(self):
        if self.base_lr < 0 or self.step_epochs < 1 or not 0 < self.gamma <= 1:
            raise ConfigError(f"invalid step schedule {self}")

    def __call__(self, epoch: int) -> float:
        return self.base_lr * self.gamma ** (epoch // self.step_epochs)


@dataclass
class Adam:
    """Bias-corrected Adam acting in place on a name -> array registry."""

    params: dict[str, np.ndarray]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        missing = [name for name in self.params if name not in grads]
        if missing:
            raise RegistryError(f"no gradient for parameters: {missing}")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"TOKDCKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path | io.BytesIO, state: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write ``state`` as header, JSON metadata, name/shape manifest, then tensor payloads.

    Layout (little endian)::

        b"TOKDCKPT"  u32 version  u32 meta_len  meta (UTF-8 JSON)
        u32 n_entries
        n_entries x [u32 name_len, name (UTF-8), u32 rank, rank x u64 dim]
        n_entries x tensor record (b"TOKD", u32 rank, u64 dims, f64 payload)
    """
    names = sorted(state)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        shape = np.shape(state[name])
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}Q", *shape))
    for name in names:
        write_tensor(buf, state[name])
    if isinstance(path, io.BytesIO):
        path.write(buf.getvalue())
    else:
        Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path | bytes) -> tuple[dict[str, np.ndarray], dict]:
    data = path if isinstance(path, bytes) else Path(path).read_bytes()
    f = io.BytesIO(data)
    if f.read(8) != CKPT_MAGIC:
        raise DataError(f"{path if not isinstance(path, bytes) else '<bytes>'}: not a checkpoint")
    version, meta_len = struct.unpack("<II", f.read(8))
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    meta = json.loads(f.read(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", f.read(4))
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", f.read(4))
        name = f.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        manifest.append((name, tuple(shape)))
    state = {}
    for name, shape in manifest:
        t = read_tensor(f)
        if t.shape != shape:
            raise DataError(f"checkpoint entry {name}: payload {t.shape} != manifest {shape}")
        state[name] = t
    return state, meta
