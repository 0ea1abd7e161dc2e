"""Dense tensors with reverse-mode automatic differentiation.

Every operation that participates in training records itself on the
implicit gradient tape (the operand graph). ``Tensor.backward`` replays
the tape in reverse topological order, visiting each node exactly once.
Arrays are float64 by default so finite-difference checks are meaningful;
float32 is supported for training speed.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug_enabled() -> bool:
    return getattr(_state, "debug", False)


def set_debug(flag: bool) -> None:
    """Enable per-op finiteness assertions (slow; for tests)."""
    _state.debug = bool(flag)


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """An n-dimensional array with an optional gradient buffer.

    ``data`` is a numpy array (float32 or float64, row-major). ``grad``
    is lazily allocated with the same shape during backward. Tensors are
    value-semantic: nothing mutates ``data`` except the optimizer.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward_fn")

    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(Tensor._ids)
        self._parents = ()
        self._backward_fn = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar root, got shape {self.shape}")
        tape = _topo_tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward_fn is not None:
                node._backward_fn()

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis):
        return reduce_max(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose2d(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _topo_tape(root: Tensor) -> list:
    """Tape for ``root``: nodes ordered so every parent precedes its child."""
    tape = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return tape


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # First write may alias op-local arrays; accumulation is out-of-place so
    # aliased buffers are never mutated.
    if t.grad is None:
        t.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    if _debug_enabled() and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a tensor operation")
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# -- elementwise / broadcasting ops ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data + b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data - b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad, b.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, -out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data * b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data / b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = _make(np.power(a.data, exponent), (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * exponent * np.power(a.data, exponent - 1.0))

    out._backward_fn = backward if out.requires_grad else None
    return out


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * out.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = _make(np.log(a.data), (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad / a.data)

    out._backward_fn = backward if out.requires_grad else None
    return out


def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data), (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * (1.0 - out.data * out.data))

    out._backward_fn = backward if out.requires_grad else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    # exp overflow at very negative x saturates to 0, which is the right limit
    with np.errstate(over="ignore"):
        z = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(z, (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * out.data * (1.0 - out.data))

    out._backward_fn = backward if out.requires_grad else None
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0.0), (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * (a.data > 0))

    out._backward_fn = backward if out.requires_grad else None
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = _make(np.clip(a.data, lo, hi), (a,), None)

    def backward():
        if a.requires_grad:
            inside = (a.data >= lo) & (a.data <= hi)
            _accumulate(a, out.grad * inside)

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _make(a.data.reshape(shape), (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad.reshape(a.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    out = _make(a.data.T.copy(), (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad.T)

    out._backward_fn = backward if out.requires_grad else None
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * out.ndim
                index[axis] = slice(int(start), int(stop))
                _accumulate(t, out.grad[tuple(index)])

    out._backward_fn = backward if out.requires_grad else None
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = _make(a.data[index].copy(), (a,), None)

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[index] = out.grad
            _accumulate(a, g)

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- reductions ------------------------------------------------------------


def _restore_axes(g: np.ndarray, in_shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(in_shape)), in_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(in_shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, _restore_axes(out.grad, a.shape, axis, keepdims))

    out._backward_fn = backward if out.requires_grad else None
    return out


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out_data.size
    out = _make(out_data, (a,), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, _restore_axes(out.grad, a.shape, axis, keepdims) / count)

    out._backward_fn = backward if out.requires_grad else None
    return out


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient flows to the first maximal element."""
    axis = axis % a.ndim
    out = _make(a.data.max(axis=axis), (a,), None)
    argmax = np.argmax(a.data, axis=axis)

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.put_along_axis(
                g, np.expand_dims(argmax, axis), np.expand_dims(out.grad, axis), axis
            )
            _accumulate(a, g)

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d tensors, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- spatial ops -------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Return (cols [N, C*kh*kw, Ho*Wo], Ho, Wo) for x [N,C,H,W]."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    cols = windows.reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add columns [N, C*kh*kw, Ho*Wo] back to input shape (adjoint of _im2col)."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    g = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            g[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += cols6[:, :, i, j]
    if padding:
        g = g[:, :, padding : padding + h, padding : padding + w]
    return g


def conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation: x [N,Cin,H,W] * weight [Cout,Cin,kH,kW] (+ bias [Cout])."""
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d channel mismatch: input has {cin} channels (shape {x.shape}), "
            f"weight expects {cin_w} (shape {weight.shape})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if padding < 0:
        raise ValueError("conv2d padding must be >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d input {h}x{w} with padding {padding} smaller than kernel {kh}x{kw}"
        )

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_data = np.matmul(wmat, cols)  # [N, Cout, Ho*Wo]
    if bias is not None:
        out_data += bias.data.reshape(1, cout, 1)
    out_data = out_data.reshape(n, cout, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out_data, parents, None)

    def backward():
        g3 = out.grad.reshape(n, cout, ho * wo)
        if weight.requires_grad:
            cols_b, _, _ = _im2col(x.data, kh, kw, stride, padding)  # recomputed to bound memory
            gw = np.tensordot(g3, cols_b, axes=([0, 2], [0, 2]))
            _accumulate(weight, gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            _accumulate(x, _col2im(gcols, x.shape, kh, kw, stride, padding))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g3.sum(axis=(0, 2)))

    out._backward_fn = backward if out.requires_grad else None
    return out


def pool2d(x: Tensor, kind: str, kernel: int, stride=None) -> Tensor:
    """Non-overlapping max/avg pooling; only stride == kernel is supported."""
    if stride is None:
        stride = kernel
    if stride != kernel:
        raise ValueError(f"pool2d supports stride == kernel only, got kernel={kernel} stride={stride}")
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d kind must be 'max' or 'avg', got {kind!r}")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"pool2d input {h}x{w} not divisible by kernel {kernel}")
    ho, wo = h // kernel, w // kernel
    blocks = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, ho, wo, kernel * kernel)

    if kind == "avg":
        out = _make(flat.mean(axis=-1), (x,), None)

        def backward():
            if x.requires_grad:
                g = np.repeat(np.repeat(out.grad, kernel, axis=2), kernel, axis=3)
                _accumulate(x, g / (kernel * kernel))

    else:
        out = _make(flat.max(axis=-1), (x,), None)
        argmax = np.argmax(flat, axis=-1)  # first occurrence wins ties

        def backward():
            if x.requires_grad:
                gflat = np.zeros_like(flat)
                np.put_along_axis(gflat, argmax[..., None], out.grad[..., None], axis=-1)
                g = gflat.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
                _accumulate(x, g.reshape(n, c, h, w))

    out._backward_fn = backward if out.requires_grad else None
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling along both spatial axes."""
    n, c, h, w = x.shape
    out = _make(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,), None)

    def backward():
        if x.requires_grad:
            g = out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
            _accumulate(x, g)

    out._backward_fn = backward if out.requires_grad else None
    return out


# -- composites --------------------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis``; shift by the detached max for stability."""
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def stack(tensors, axis: int) -> Tensor:
    """Stack equal-shaped tensors along a fresh axis."""
    tensors = list(tensors)
    shape = tensors[0].shape
    new_shape = shape[:axis] + (1,) + shape[axis:]
    return concat([reshape(t, new_shape) for t in tensors], axis=axis)
