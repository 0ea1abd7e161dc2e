"""Neural-network modules, the Adam optimizer, LR scheduling and checkpoints."""

from __future__ import annotations

import json
import struct

import numpy as np

from . import tensor as T
from .tensor import Tensor


class CheckpointError(Exception):
    """Raised for malformed checkpoint files."""


class Module:
    """Base class with recursive parameter discovery and train/eval mode."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def _children(self):
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def train(self):
        self.training = True
        for child in self._children():
            child.train()
        return self

    def eval(self):
        self.training = False
        for child in self._children():
            child.eval()
        return self

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.buffers())
        return state

    def buffers(self) -> dict:
        """Non-trainable persistent arrays (e.g. batchnorm running stats)."""
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Module):
                for k, v in value.buffers().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for k, v in item.buffers().items():
                            out[f"{name}.{i}.{k}"] = v
        for name in getattr(self, "_buffer_names", ()):
            out[name] = getattr(self, name)
        return out

    def load_state_dict(self, state: dict) -> None:
        own = {name: p for name, p in self.named_parameters()}
        buffer_owners = self._buffer_owners()
        for name, array in state.items():
            if name in own:
                param = own[name]
                if tuple(param.shape) != tuple(array.shape):
                    raise CheckpointError(
                        f"shape mismatch for {name}: model {param.shape}, file {array.shape}"
                    )
                param.data = array.astype(param.dtype, copy=True)
            elif name in buffer_owners:
                owner, attr = buffer_owners[name]
                setattr(owner, attr, array.astype(getattr(owner, attr).dtype, copy=True))
            else:
                raise CheckpointError(f"unexpected entry in state dict: {name}")
        missing = set(own) - set(state)
        if missing:
            raise CheckpointError(f"state dict missing parameters: {sorted(missing)}")

    def _buffer_owners(self, prefix: str = "") -> dict:
        owners = {}
        for name, value in vars(self).items():
            if isinstance(value, Module):
                owners.update(value._buffer_owners(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        owners.update(item._buffer_owners(f"{prefix}{name}.{i}."))
        for name in getattr(self, "_buffer_names", ()):
            owners[f"{prefix}{name}"] = (self, name)
        return owners

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    """3x3-style convolution layer with He-normal init."""

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, padding=0,
                 bias=True, dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        scale = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            rng.normal(0.0, scale, (out_channels, in_channels, kernel, kernel)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, rng=None, momentum=0.1, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        gamma = T.reshape(self.gamma, (1, c, 1, 1))
        beta = T.reshape(self.beta, (1, c, 1, 1))
        if self.training:
            count = n * h * w
            if count < 2:
                raise ValueError(
                    f"batchnorm needs at least 2 values per channel in train mode, got {count}"
                )
            mean = T.reduce_mean(x, axis=(0, 2, 3), keepdims=True)
            centered = T.sub(x, mean)
            var = T.reduce_mean(T.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
            inv_std = T.power(T.add(var, Tensor(np.full((1, c, 1, 1), self.eps, dtype=x.dtype))), -0.5)
            xhat = T.mul(centered, inv_std)
            batch_mean = mean.data.reshape(c)
            batch_var = var.data.reshape(c) * (count / max(count - 1, 1))  # unbiased for running stats
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * batch_mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * batch_var
        else:
            rm = self.running_mean.reshape(1, c, 1, 1)
            rv = self.running_var.reshape(1, c, 1, 1)
            xhat = T.mul(T.sub(x, Tensor(rm.astype(x.dtype))),
                         Tensor((1.0 / np.sqrt(rv + self.eps)).astype(x.dtype)))
        return T.add(T.mul(xhat, gamma), beta)


class Linear(Module):
    """Affine map y = x W^T + b."""

    def __init__(self, in_features, out_features, rng, bias=True, dtype=np.float64):
        super().__init__()
        scale = np.sqrt(1.0 / in_features)
        self.weight = Tensor(
            rng.normal(0.0, scale, (out_features, in_features)).astype(dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(
                f"linear expects input [N,{self.weight.shape[1]}], got shape {x.shape}"
            )
        out = T.matmul(x, T.transpose2d(self.weight))
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity: relu | sigmoid | tanh."""
    if kind == "relu":
        return T.relu(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind == "tanh":
        return T.tanh(x)
    raise ValueError(f"unknown activation kind {kind!r}")


class Adam:
    """Adam with decoupled weight decay (applied before the moment update)."""

    def __init__(self, named_params, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.learning_rate = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for _, p in self.named_params]
        self._v = [np.zeros_like(p.data) for _, p in self.named_params]

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, (name, p) in enumerate(self.named_params):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if self.weight_decay:
                p.data -= self.learning_rate * self.weight_decay * p.data
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


class PlateauScheduler:
    """Decays the optimizer learning rate when a monitored loss stops improving."""

    def __init__(self, optimizer: Adam, patience=3, decay_factor=0.1, min_lr=1e-6):
        if not 0.0 < decay_factor < 1.0:
            raise ValueError(f"decay_factor must be in (0,1), got {decay_factor}")
        self.optimizer = optimizer
        self.patience = patience
        self.decay_factor = decay_factor
        self.min_lr = min_lr
        self.best_metric = np.inf
        self.epochs_since_improvement = 0

    @property
    def learning_rate(self) -> float:
        return self.optimizer.learning_rate

    def step(self, val_metric: float) -> float:
        """Call once per epoch with the validation loss (lower is better)."""
        if val_metric < self.best_metric:
            self.best_metric = val_metric
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                self.optimizer.learning_rate = max(
                    self.optimizer.learning_rate * self.decay_factor, self.min_lr
                )
                self.epochs_since_improvement = 0
        return self.optimizer.learning_rate


# -- checkpoint file format ---------------------------------------------------
#
# "EMB1" | u32 little-endian header length | UTF-8 JSON header | raw arrays.
# The header lists parameter names/shapes in order; payload entries follow
# that order, each little-endian in the header dtype.

_MAGIC = b"EMB1"
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def save_checkpoint(path, state: dict, step: int = 0, meta: dict | None = None,
                    dtype: str = "f32") -> None:
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype!r}")
    entries = [{"name": name, "shape": list(arr.shape)} for name, arr in state.items()]
    header = {"dtype": dtype, "step": int(step), "meta": meta or {}, "params": entries}
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in state.items():
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())


def load_checkpoint(path):
    """Return (state dict name -> array, step, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"bad magic at offset 0: expected {_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint: missing header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError("truncated checkpoint: header shorter than declared")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype!r}")
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    state = {}
    offset = 8 + hlen
    for entry in header["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if offset + count * itemsize > len(raw):
            raise CheckpointError(f"truncated checkpoint payload at parameter {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[dtype], count=count, offset=offset).reshape(shape)
        state[entry["name"]] = arr.copy()
        offset += count * itemsize
    return state, header.get("step", 0), header.get("meta", {})
