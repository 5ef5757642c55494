"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is recorded eagerly: each operation returns a Tensor that keeps
references to its parents and a closure that routes the output gradient
back to them.  ``Tensor.backward()`` on a scalar then walks the recorded
graph once in reverse topological order.

Everything is float64 and single threaded.  Tensors may be handed between
threads, but one graph must only ever be driven by one writer at a time.
Every completed operation is checked for non-finite values; NaN or Inf
raises NumericError immediately rather than poisoning downstream state.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _ensure_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array with an optional gradient slot.

    ``data`` is always a contiguous float64 ndarray.  ``grad`` is either
    None or an ndarray of identical shape.  Tensors made by operations
    carry provenance (parents plus a backward closure) so that a scalar
    loss can be differentiated with :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, op: str | None = None,
                 parents: tuple = (), backward_fn=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward_fn = backward_fn

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- gradient machinery ----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate grads of every reachable tensor that requires them.

        The receiver must be a scalar produced by recorded operations.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.shape}")
        if self._backward_fn is None:
            raise UsageError("backward() on a tensor without recorded provenance")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return hadamard(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return hadamard(self, Tensor(np.float64(-1.0)))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn) -> Tensor:
    _ensure_finite(op, data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)
    return Tensor(data, op=op)


# -- elementwise and linear algebra ops ---------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting addition."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), backward_fn)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise product."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} do not broadcast")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, "hadamard", (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, "matmul", (a, b), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    # Branch on sign so exp never overflows.
    z = x.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))

    return _make(out, "sigmoid", (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out * out))

    return _make(out, "tanh", (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _make(out, "relu", (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.shape).astype(np.float64))

    return _make(data, "sum", (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean())

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / n, x.shape).astype(np.float64))

    return _make(data, "mean", (x,), backward_fn)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _make(data, "reshape", (x,), backward_fn)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _make(data, "concat", tuple(tensors), backward_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"slice: [{start}:{start + length}) outside axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = x.data[index].copy()

    def backward_fn(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            x._accumulate(full)

    return _make(data, "slice", (x,), backward_fn)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup (embedding): out[k] = table[indices[k]]."""
    indices = np.asarray(indices)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index outside [0, {table.shape[0]})")
    data = table.data[indices]

    def backward_fn(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, indices, g)
            table._accumulate(full)

    return _make(data, "gather_rows", (table,), backward_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not (0.0 <= rate < 1.0):
        raise UsageError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate) / keep

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _make(x.data * mask, "dropout", (x,), backward_fn)


# -- convolution and pooling ---------------------------------------------------


def _conv_geometry(x_shape, w_shape, stride, pad):
    b, c_in, h, w = x_shape
    c_out, c_in_w, kh, kw = w_shape
    if c_in != c_in_w:
        raise ShapeError(f"conv2d: input channels {c_in} != weight channels {c_in_w}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w} with pad {pad}")
    return oh, ow


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return windows.reshape(b, c * kh * kw, oh * ow)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    dc = dcols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dc[:, :, i, j]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (B,C,H,W) input with (O,C,kh,kw) weights."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and weight, got {x.shape} and {weight.shape}")
    oh, ow = _conv_geometry(x.shape, weight.shape, stride, pad)
    b = x.shape[0]
    c_out, _, kh, kw = weight.shape
    cols = _im2col(x.data, kh, kw, stride, pad)
    w_mat = weight.data.reshape(c_out, -1)
    data = np.matmul(w_mat, cols).reshape(b, c_out, oh, ow)

    def backward_fn(g):
        g2 = g.reshape(b, c_out, oh * ow)
        if weight.requires_grad:
            dw = np.einsum("bop,bkp->ok", g2, cols)
            weight._accumulate(dw.reshape(weight.shape))
        if x.requires_grad:
            dcols = np.matmul(w_mat.T, g2)
            x._accumulate(_col2im(dcols, x.shape, kh, kw, stride, pad))

    return _make(data, "conv2d", (x, weight), backward_fn)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool: need 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool: spatial dims {h}x{w} not divisible by window {k}")
    data = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k))

    return _make(data, "avg_pool", (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over all spatial positions: (B,C,H,W) -> (B,C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: need 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return _make(data, "global_avg_pool", (x,), backward_fn)


# -- batch normalization -------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel scale/shift parameters plus running statistics.

    gamma and beta are trainable; the running moments are plain state
    updated as a side effect of training-mode forward passes and used
    verbatim in inference mode.
    """

    gamma: "Parameter"
    beta: "Parameter"
    running_mean: "Parameter"
    running_var: "Parameter"
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def create(cls, name: str, channels: int, momentum: float = 0.9,
               epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Parameter(f"{name}.gamma", Tensor(np.ones(channels), requires_grad=True)),
            beta=Parameter(f"{name}.beta", Tensor(np.zeros(channels), requires_grad=True)),
            running_mean=Parameter(f"{name}.running_mean", Tensor(np.zeros(channels)),
                                   trainable=False),
            running_var=Parameter(f"{name}.running_var", Tensor(np.ones(channels)),
                                  trainable=False),
            momentum=momentum,
            epsilon=epsilon,
        )

    def parameters(self) -> list["Parameter"]:
        return [self.gamma, self.beta, self.running_mean, self.running_var]


def _channel_shape(ndim: int, channels: int) -> tuple:
    return (1, channels) + (1,) * (ndim - 2)


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize over every axis but the channel axis (axis 1).

    Training mode normalizes by mini-batch statistics and folds them into
    the running moments; inference mode uses the running moments only.
    """
    if x.data.ndim < 2:
        raise ShapeError(f"batch_norm: need at least 2-D input, got {x.shape}")
    channels = x.shape[1]
    if state.gamma.tensor.shape != (channels,):
        raise ShapeError(
            f"batch_norm: gamma has {state.gamma.tensor.shape[0]} channels, input has {channels}")
    axes = (0,) + tuple(range(2, x.data.ndim))
    cshape = _channel_shape(x.data.ndim, channels)
    gamma, beta = state.gamma.tensor, state.beta.tensor
    eps = state.epsilon

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean.tensor.data = m * state.running_mean.tensor.data + (1 - m) * mean
        state.running_var.tensor.data = m * state.running_var.tensor.data + (1 - m) * var
    else:
        mean = state.running_mean.tensor.data
        var = state.running_var.tensor.data

    ivar = 1.0 / np.sqrt(var + eps)
    xmu = x.data - mean.reshape(cshape)
    xhat = xmu * ivar.reshape(cshape)
    data = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    n = x.data.size // channels

    def backward_fn(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(cshape)
            if training:
                ivar_c = ivar.reshape(cshape)
                dvar = (dxhat * xmu).sum(axis=axes, keepdims=True) * (-0.5) * ivar_c ** 3
                dmean = (-dxhat.sum(axis=axes, keepdims=True) * ivar_c
                         + dvar * (-2.0 / n) * xmu.sum(axis=axes, keepdims=True))
                dx = dxhat * ivar_c + dvar * 2.0 * xmu / n + dmean / n
            else:
                dx = dxhat * ivar.reshape(cshape)
            x._accumulate(dx)

    return _make(data, "batch_norm", (x, gamma, beta), backward_fn)


# -- losses ---------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (plain ndarray helper)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray,
                          reduction: str = "mean") -> Tensor:
    """Combined softmax + negative log likelihood over integer targets.

    logits is (B, K); targets is an int array of shape (B,).  Returns a
    scalar, either the mean or the sum of per-example losses.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets)
    b, k = logits.shape
    if targets.shape != (b,):
        raise ShapeError(f"softmax_cross_entropy: targets shape {targets.shape} != ({b},)")
    if targets.min() < 0 or targets.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: target index outside [0, {k})")
    if reduction not in ("mean", "sum"):
        raise UsageError(f"softmax_cross_entropy: unknown reduction {reduction!r}")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = logsumexp - z[np.arange(b), targets]
    data = np.asarray(losses.mean() if reduction == "mean" else losses.sum())

    def backward_fn(g):
        if logits.requires_grad:
            p = softmax(z)
            p[np.arange(b), targets] -= 1.0
            scale = g / b if reduction == "mean" else g
            logits._accumulate(p * scale)

    return _make(data, "softmax_cross_entropy", (logits,), backward_fn)


# -- parameters -------------------------------------------------------------------


@dataclass
class Parameter:
    """A named, optionally trainable tensor.

    Names are dotted paths ("decoder.layer0.W_z") and must be unique
    within one model; frozen parameters receive no optimizer updates.
    """

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        if self.trainable:
            self.tensor.requires_grad = True


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform init in [-s, s] with s = 1/sqrt(fan_in)."""
    s = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-s, s, size=shape)


def backward(loss: Tensor, params: list[Parameter] | None = None) -> None:
    """Differentiate a scalar loss; unreachable trainable params get zero grad."""
    loss.backward()
    if params is not None:
        for p in params:
            if p.trainable and p.tensor.grad is None:
                p.tensor.grad = np.zeros_like(p.tensor.data)


# -- generic dispatch ---------------------------------------------------------------

_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "hadamard": hadamard,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "sum": sum_all,
    "mean": mean_all,
    "reshape": reshape,
    "concat": concat,
    "slice": narrow,
    "gather_rows": gather_rows,
    "dropout": dropout,
    "conv2d": conv2d,
    "avg_pool": avg_pool2d,
    "global_avg_pool": global_avg_pool,
    "batch_norm": batch_norm,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def forward_op(op_kind: str, inputs: list[Tensor], **attrs) -> Tensor:
    """Apply one named operation; see _OP_TABLE for the supported kinds."""
    try:
        fn = _OP_TABLE[op_kind]
    except KeyError:
        raise UsageError(f"forward_op: unknown op kind {op_kind!r}")
    if op_kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
