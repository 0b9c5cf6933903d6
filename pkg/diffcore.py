"""
Minimal reverse-mode differentiation on numpy arrays.

Each Tensor remembers the Function that produced it. Calling backward() on a
scalar output walks the graph in reverse topological order and accumulates
gradients into the leaf tensors (Parameters and inputs created with
requires_grad=True). Only the primitives the descriptor network and its
losses need are provided.
"""

import logging
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

# === Constants ===
NORM_EPS = 1e-12
FEATURE_NORM_EPS = 1e-5
CHECKPOINT_MAGIC = b"COAMCKPT"
CHECKPOINT_VERSION = 1

_grad_state = {"enabled": True}


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""

    def __init__(self, primitive: str, expected, actual):
        self.primitive = primitive
        self.expected = expected
        self.actual = actual
        super().__init__(f"{primitive}: expected shape {expected}, got {actual}")


class CheckpointError(ValueError):
    pass


@contextmanager
def no_grad():
    """Evaluate without recording the graph (inference and numeric checks)."""
    previous = _grad_state["enabled"]
    _grad_state["enabled"] = False
    try:
        yield
    finally:
        _grad_state["enabled"] = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """n-dimensional float array that can take part in a recorded graph."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._ctx: Optional["Function"] = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype}>"

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims=False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return reduce_mean(self, axis, keepdims)
    def max(self, axis=None, keepdims=False): return reduce_max(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else axes)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) * grad into every leaf that requires grad."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward", "scalar output or explicit upstream gradient", self.shape)
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError("backward", self.shape, grad.shape)

        pending = {id(self): grad}
        for node in reversed(_topological_order(self)):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._ctx.backward(node_grad)
            for parent, parent_grad in zip(node._ctx.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


class Parameter(Tensor):
    """Trainable leaf tensor; its gradient always exists and has the value's shape."""

    def __init__(self, data, name: Optional[str] = None, trainable: bool = True, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def gradient(self) -> np.ndarray:
        return self.grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


class Function:
    """One recorded operation: forward on arrays, backward returns one gradient per parent."""

    name = "function"

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = Tensor(fn.forward(*[t.data for t in inputs], **kwargs))
        if _grad_state["enabled"] and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
        return out

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None


# === Elementwise ===
class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        z = np.exp(-np.abs(x))
        self.out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Sqrt(Function):
    """Square root whose gradient at 0 is taken as 0 (distances of identical vectors)."""

    name = "sqrt"

    def forward(self, x):
        self.out = np.sqrt(np.maximum(x, 0.0))
        return self.out

    def backward(self, grad):
        safe = np.where(self.out > 0, self.out, 1.0)
        return (np.where(self.out > 0, grad / (2.0 * safe), 0.0),)


class Abs(Function):
    name = "abs"

    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad):
        return (grad * self.sign,)


# === Linear algebra ===
class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(self.name, f"(..., n, {a.shape[-1] if a.ndim else '?'}) @ ({a.shape[-1] if a.ndim else '?'}, m)", (a.shape, b.shape))
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ grad
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Linear(Function):
    """y = x W^T (+ b) over the last axis."""

    name = "linear"

    def forward(self, x, weight, bias=None):
        if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
            raise ShapeError(self.name, f"(..., {weight.shape[-1]})", x.shape)
        if bias is not None and bias.shape != (weight.shape[0],):
            raise ShapeError(self.name, (weight.shape[0],), bias.shape)
        self.x, self.weight, self.has_bias = x, weight, bias is not None
        out = x @ weight.T
        return out + bias if bias is not None else out

    def backward(self, grad):
        out_features, in_features = self.weight.shape
        flat_grad = grad.reshape(-1, out_features)
        gx = grad @ self.weight
        gw = flat_grad.T @ self.x.reshape(-1, in_features)
        if self.has_bias:
            return gx, gw, flat_grad.sum(axis=0)
        return gx, gw


class Conv2d(Function):
    """Cross-correlation on (N, C, H, W) input with zero padding."""

    name = "conv2d"

    def forward(self, x, weight, bias=None, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
            raise ShapeError(self.name, f"(N, {weight.shape[1] if weight.ndim == 4 else '?'}, H, W)", x.shape)
        if bias is not None and bias.shape != (weight.shape[0],):
            raise ShapeError(self.name, (weight.shape[0],), bias.shape)
        k = weight.shape[2]
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padded.shape[2] < k or padded.shape[3] < k:
            raise ShapeError(self.name, f"spatial size >= {k} after padding", padded.shape[2:])
        cols = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        self.cols, self.weight = cols, weight
        self.x_shape, self.padded_shape = x.shape, padded.shape
        self.stride, self.padding, self.has_bias = stride, padding, bias is not None
        out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias[None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        k, s, p = self.weight.shape[2], self.stride, self.padding
        out_h, out_w = grad.shape[2], grad.shape[3]
        gw = np.tensordot(grad, self.cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(grad, self.weight, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        gpad = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                gpad[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        h, w = self.x_shape[2], self.x_shape[3]
        gx = gpad[:, :, p:p + h, p:p + w]
        if self.has_bias:
            return gx, gw, grad.sum(axis=(0, 2, 3))
        return gx, gw


class FeatureNorm(Function):
    """Per-instance affine normalization over the given axes (well defined at batch size 1)."""

    name = "feature_norm"

    def forward(self, x, gamma, beta, axes: Tuple[int, ...] = (2, 3)):
        try:
            np.broadcast_shapes(x.shape, gamma.shape, beta.shape)
        except ValueError:
            raise ShapeError(self.name, x.shape, (gamma.shape, beta.shape)) from None
        self.axes = tuple(axes)
        self.count = int(np.prod([x.shape[a] for a in self.axes]))
        mean = x.mean(axis=self.axes, keepdims=True)
        var = x.var(axis=self.axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + FEATURE_NORM_EPS)
        self.xhat = (x - mean) * self.inv_std
        self.gamma, self.beta_shape = gamma, beta.shape
        return gamma * self.xhat + beta

    def backward(self, grad):
        gxhat = grad * self.gamma
        n = self.count
        gx = (self.inv_std / n) * (
            n * gxhat
            - gxhat.sum(axis=self.axes, keepdims=True)
            - self.xhat * (gxhat * self.xhat).sum(axis=self.axes, keepdims=True)
        )
        ggamma = _unbroadcast(grad * self.xhat, self.gamma.shape)
        gbeta = _unbroadcast(grad, self.beta_shape)
        return gx, ggamma, gbeta


def _interpolation_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    """Row i holds the bilinear weights of output sample i (half-pixel centers)."""
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    matrix = np.zeros((out_size, in_size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix


class BilinearResize(Function):
    name = "bilinear_resize"

    def forward(self, x, size: Tuple[int, int] = None):
        if x.ndim != 4:
            raise ShapeError(self.name, "(N, C, H, W)", x.shape)
        self.ry = _interpolation_matrix(size[0], x.shape[2], x.dtype)
        self.rx = _interpolation_matrix(size[1], x.shape[3], x.dtype)
        return self.ry @ x @ self.rx.T

    def backward(self, grad):
        return (self.ry.T @ grad @ self.rx,)


class MaxPool2x2(Function):
    name = "max_pool2x2"

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(self.name, "(N, C, even H, even W)", x.shape)
        n, c, h, w = x.shape
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self.index = windows.argmax(axis=-1)[..., None]
        self.x_shape = x.shape
        return np.take_along_axis(windows, self.index, axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.x_shape
        windows = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(windows, self.index, grad[..., None], axis=-1)
        gx = windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)


# === Normalizations ===
class Softmax(Function):
    name = "softmax"

    def forward(self, x):
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        self.out = shifted / shifted.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        return (self.out * (grad - (grad * self.out).sum(axis=-1, keepdims=True)),)


class LogSumExp(Function):
    name = "logsumexp"

    def forward(self, x, axis: int = -1):
        self.axis = axis
        peak = x.max(axis=axis, keepdims=True)
        shifted = np.exp(x - peak)
        total = shifted.sum(axis=axis, keepdims=True)
        self.weights = shifted / total
        return np.squeeze(peak + np.log(total), axis=axis)

    def backward(self, grad):
        return (np.expand_dims(grad, self.axis) * self.weights,)


class L2Normalize(Function):
    """Unit-norm along an axis; vectors with norm below NORM_EPS map to zero with zero gradient."""

    name = "l2_normalize"

    def forward(self, x, axis: int = -1):
        self.axis = axis
        norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        self.valid = norm > NORM_EPS
        self.norm = np.where(self.valid, norm, 1.0)
        self.out = np.where(self.valid, x / self.norm, 0.0).astype(x.dtype)
        return self.out

    def backward(self, grad):
        radial = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (np.where(self.valid, (grad - self.out * radial) / self.norm, 0.0),)


# === Structural ===
class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = 0):
        reference = list(arrays[0].shape)
        for array in arrays[1:]:
            other = list(array.shape)
            if len(other) != len(reference) or any(
                a != b for i, (a, b) in enumerate(zip(reference, other)) if i != axis % len(reference)
            ):
                raise ShapeError(self.name, tuple(reference), tuple(other))
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=None):
        self.x_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(self.name, shape, x.shape) from None

    def backward(self, grad):
        return (grad.reshape(self.x_shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=None):
        self.axes = tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class IndexSelect(Function):
    """Rows x[index] along axis 0; repeated indices accumulate their gradients."""

    name = "index_select"

    def forward(self, x, index=None):
        self.index = np.asarray(index, dtype=np.int64)
        if self.index.size and (self.index.min() < -x.shape[0] or self.index.max() >= x.shape[0]):
            raise ShapeError(self.name, f"indices in [0, {x.shape[0]})", (int(self.index.min()), int(self.index.max())))
        self.x_shape, self.dtype = x.shape, x.dtype
        return x[self.index]

    def backward(self, grad):
        gx = np.zeros(self.x_shape, dtype=grad.dtype)
        np.add.at(gx, self.index, grad)
        return (gx,)


# === Reductions ===
class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None, keepdims=False):
        self.x_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.x_shape).copy(),)


class Mean(Sum):
    name = "mean"

    def forward(self, x, axis=None, keepdims=False):
        out = super().forward(x, axis, keepdims)
        self.count = x.size // max(out.size, 1) if axis is not None else x.size
        return out / self.count

    def backward(self, grad):
        return (super().backward(grad)[0] / self.count,)


class Max(Function):
    """Reduction max; the gradient goes to the first maximal element."""

    name = "max"

    def forward(self, x, axis=None, keepdims=False):
        self.x_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        if axis is None:
            flat = x.reshape(-1)
            self.index = int(flat.argmax())
            out = flat[self.index]
            return np.asarray(out).reshape((1,) * x.ndim) if keepdims else np.asarray(out)
        self.index = np.expand_dims(x.argmax(axis=axis), axis)
        out = np.take_along_axis(x, self.index, axis=axis)
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward(self, grad):
        gx = np.zeros(self.x_shape, dtype=grad.dtype)
        if self.axis is None:
            gx.reshape(-1)[self.index] = np.asarray(grad).reshape(-1)[0]
            return (gx,)
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        np.put_along_axis(gx, self.index, grad, axis=self.axis)
        return (gx,)


# === Functional interface ===
def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    return Mul.apply(a, b)


def _lift(a, b) -> Tuple[Tensor, Tensor]:
    """Wrap plain numbers as constants in the dtype of the other operand."""
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """2D convolution; padding defaults to 'same' (k // 2) for odd kernels."""
    if padding is None:
        padding = weight.shape[2] // 2
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, padding=padding)
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    return LogSumExp.apply(x, axis=axis)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def absolute(x: Tensor) -> Tensor:
    return Abs.apply(x)


def feature_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: Tuple[int, ...] = (2, 3)) -> Tensor:
    return FeatureNorm.apply(x, gamma, beta, axes=tuple(axes))


def bilinear_resize(x: Tensor, size: Tuple[int, int]) -> Tensor:
    return BilinearResize.apply(x, size=tuple(size))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    return L2Normalize.apply(x, axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def max_pool2x2(x: Tensor) -> Tensor:
    return MaxPool2x2.apply(x)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor, axes) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def index_select(x: Tensor, index) -> Tensor:
    return IndexSelect.apply(x, index=index)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reduce_max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Max.apply(x, axis=axis, keepdims=keepdims)


# === Gradient checking ===
@dataclass
class GradCheckReport:
    """Max relative error |analytic - numeric| / max(1, |numeric|) per checked tensor."""

    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def failed(self) -> List[str]:
        return [name for name, error in self.errors.items() if not error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(
    fn: Callable[[], Tensor],
    params: Union[Dict[str, Tensor], Sequence[Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar graph against central differences.

    fn rebuilds the graph from the current parameter values each call. With
    max_entries set, only that many randomly chosen entries per tensor are
    perturbed (the analytic gradient is still computed in full).
    """
    named = dict(params) if isinstance(params, dict) else {
        (p.name or f"param_{i}"): p for i, p in enumerate(params)
    }
    for tensor in named.values():
        tensor.zero_grad()

    out = fn()
    if out.size != 1:
        raise ShapeError("grad_check", "scalar output", out.shape)
    out.backward()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, tensor in named.items():
        analytic = tensor.grad.reshape(-1).copy()
        # perturbations go through a flat view, so the storage must be contiguous
        if not tensor.data.flags.c_contiguous:
            tensor.data = np.ascontiguousarray(tensor.data)
        flat = tensor.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            entries = np.arange(flat.size)
        worst = 0.0
        with no_grad():
            for i in entries:
                original = flat[i]
                flat[i] = original + step
                plus = fn().item()
                flat[i] = original - step
                minus = fn().item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * step)
                worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
        report.errors[name] = worst
        if worst >= tolerance:
            logger.warning(f"grad_check: {name} max relative error {worst:.3e} exceeds {tolerance:.1e}")
    return report


# === Checkpoint format ===
def save_tensors(path: str, tensors: Dict[str, Union[Tensor, np.ndarray]]) -> str:
    """Write named tensors as little-endian float32 in the COAMCKPT layout (atomic replace)."""
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, value in tensors.items():
            array = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", array.ndim))
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(array.tobytes(order="C"))
    os.replace(tmp_path, path)
    logger.debug(f"Saved {len(tensors)} tensors to {path}")
    return path


def load_tensors(path: str) -> Dict[str, np.ndarray]:
    """Read a COAMCKPT file into an ordered name -> float32 array mapping."""
    with open(path, "rb") as f:
        payload = f.read()

    def take(offset: int, count: int) -> bytes:
        if offset + count > len(payload):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        return payload[offset:offset + count]

    if take(0, 8) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a COAMCKPT file")
    version, count = struct.unpack("<II", take(8, 8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    offset, tensors = 16, {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(offset, 2))
        offset += 2
        name = take(offset, name_len).decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack("<B", take(offset, 1))
        offset += 1
        dims = struct.unpack(f"<{rank}I", take(offset, 4 * rank))
        offset += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(offset, nbytes), dtype="<f4").reshape(dims).copy()
        offset += nbytes
    return tensors
