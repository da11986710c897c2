"""Dense float64 tensors with a reverse-mode gradient tape.

Tensors are immutable values. Operations record onto the tape that is active
in the current context (``with Tape() as tape:``); outside a tape they run
without recording, which is how evaluation avoids bookkeeping.

Broadcasting is deliberately narrow: same-shape operands, ``scalar * tensor``
through :func:`scale`, and a 1-D operand applied to every row of the last
dimension (per-row affine). Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import math
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericalError, ShapeError, TapeError


GradFn = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("lq_adapter_active_tape", default=None)


class Tensor:
    """An n-dimensional float64 array that may participate in a gradient tape."""

    __slots__ = ("_data", "requires_grad", "_tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False) -> None:
        array = np.array(data, dtype=np.float64, copy=True)
        if array.ndim == 0:
            array = array.reshape(1)
        self._data = _freeze(array, "tensor")
        self.requires_grad = bool(requires_grad)
        self._tape: Optional[Tape] = None
        self.tape_id: Optional[int] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, kind: str, requires_grad: bool = False) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor._data = _freeze(array, kind)
        tensor.requires_grad = requires_grad
        tensor._tape = None
        tensor.tape_id = None
        return tensor

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape)), requires_grad=requires_grad)

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return np.array(self._data, copy=True)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, "detach")

    def __repr__(self) -> str:
        return f"<Tensor shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return div(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _freeze(array: np.ndarray, kind: str) -> np.ndarray:
    if any(dim <= 0 for dim in array.shape):
        raise ShapeError(f"{kind}: every dimension must be positive, got shape {array.shape}")
    if not np.isfinite(array).all():
        raise NumericalError(f"{kind} produced non-finite values")
    array.setflags(write=False)
    return array


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: GradFn


class Tape:
    """Append-only record of differentiable operations for one forward pass."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def kinds(self) -> list[str]:
        return [node.kind for node in self._nodes]

    def reset(self) -> None:
        """Drop every recorded node so the tape can serve a new forward pass."""
        self._nodes.clear()
        self._consumed = False

    def _append(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, grad_fn: GradFn) -> None:
        output._tape = self
        output.tape_id = len(self._nodes)
        self._nodes.append(_Node(kind, inputs, output, grad_fn))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Return d(loss)/d(leaf) for every leaf that requires a gradient.

        Nodes are visited in strict reverse append order. A leaf reached through
        several paths receives the sum of the path gradients. Leaves with
        ``requires_grad=False`` never appear in the result.
        """
        if self._consumed:
            raise TapeError("backward() was already called on this tape; run a new forward pass")
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise TapeError("backward() called on an empty tape")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self._consumed = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self._nodes):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            for source, grad in zip(node.inputs, node.grad_fn(upstream)):
                if grad is None or not source.requires_grad:
                    continue
                if source._tape is not self:
                    leaves[id(source)] = source
                key = id(source)
                pending[key] = pending[key] + grad if key in pending else grad

        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            grad = pending[key]
            if not np.isfinite(grad).all():
                raise NumericalError("backward produced a non-finite gradient")
            result[leaf] = grad
        return result


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate ``loss`` on the tape that recorded it."""
    if loss._tape is None:
        raise TapeError("loss was not produced under an active tape")
    return loss._tape.backward(loss)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def _result(kind: str, inputs: tuple[Tensor, ...], value: np.ndarray, grad_fn: GradFn) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(value, dtype=np.float64), kind, requires_grad=tracked)
    if tracked:
        tape._append(kind, inputs, out, grad_fn)
    return out


def _row_reduce(grad: np.ndarray, dim: int) -> np.ndarray:
    return grad.reshape(-1, dim).sum(axis=0)


def _check_binary(kind: str, a: Tensor, b: Tensor) -> bool:
    """Return True when ``b`` is applied per row; raise on any other mismatch."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    per_row = _check_binary("add", a, b)

    def grad_fn(g):
        return g, (_row_reduce(g, b.shape[0]) if per_row else g)

    return _result("add", (a, b), a.data + b.data, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    per_row = _check_binary("sub", a, b)

    def grad_fn(g):
        return g, -(_row_reduce(g, b.shape[0]) if per_row else g)

    return _result("sub", (a, b), a.data - b.data, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    per_row = _check_binary("mul", a, b)

    def grad_fn(g):
        gb = g * a.data
        return g * b.data, (_row_reduce(gb, b.shape[0]) if per_row else gb)

    return _result("mul", (a, b), a.data * b.data, grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    if np.any(b.data == 0.0):
        raise NumericalError("div: division by zero")

    def grad_fn(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _result("div", (a, b), a.data / b.data, grad_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result("scale", (x,), x.data * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", (a, b), a.data @ b.data, grad_fn)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {x.shape}")
    return _result("transpose", (x,), x.data.T, lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(dim) for dim in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}")
    return _result("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(first) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(first, t.shape)) if i != axis
        ):
            raise ShapeError(f"concat: shapes {first} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), grad_fn)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    length = x.shape[axis]
    if not 0 <= start < stop <= length:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {axis} of shape {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return _result("slice", (x,), x.data[index], grad_fn)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the leading (token) axis."""
    rows = x.shape[0]

    def grad_fn(g):
        return (np.broadcast_to(g / rows, x.shape).copy(),)

    return _result("mean_rows", (x,), x.data.mean(axis=0).reshape(x.shape[1:] or (1,)), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    return _result("sum", (x,), np.array([x.data.sum()]), lambda g: (np.full(x.shape, g[0]),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form."""
    v = x.data
    inner = _GELU_K * (v + _GELU_C * v**3)
    t = np.tanh(inner)

    def grad_fn(g):
        d_inner = _GELU_K * (1.0 + 3.0 * _GELU_C * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _result("gelu", (x,), 0.5 * v * (1.0 + t), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _result("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"minimum: incompatible shapes {a.shape} and {b.shape}")
    a_wins = a.data < b.data
    b_wins = b.data < a.data
    return _result("minimum", (a, b), np.minimum(a.data, b.data), lambda g: (g * a_wins, g * b_wins))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"maximum: incompatible shapes {a.shape} and {b.shape}")
    a_wins = a.data > b.data
    b_wins = b.data > a.data
    return _result("maximum", (a, b), np.maximum(a.data, b.data), lambda g: (g * a_wins, g * b_wins))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row maximum."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax: last dimension is empty")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result("softmax", (x,), s, grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row over the last axis, then apply ``gain`` and ``bias``.

    A constant row has zero variance; ``eps`` keeps the scale finite and the
    row maps exactly onto ``bias``.
    """
    if eps <= 0.0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    dim = x.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must match last dimension {dim}"
        )
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd

    def grad_fn(g):
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _row_reduce(g * xhat, dim), _row_reduce(g, dim)

    return _result("layer_norm", (x, gain, bias), xhat * gain.data + bias.data, grad_fn)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-D cross-correlation of a C×H×W map with a C'×C×k×k kernel.

    Output spatial size is ``floor((H + 2*pad - k) / stride) + 1``.
    """
    if stride <= 0:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d: padding must be non-negative, got {pad}")
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    if kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be square, got {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {kernel.shape[0]} output channels")

    k = kernel.shape[2]
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    height, width = padded.shape[1:]
    if k > height or k > width:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {height}x{width}")

    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out_h, out_w = windows.shape[1:3]
    value = np.einsum("chwij,ocij->ohw", windows, kernel.data, optimize=True)
    if bias is not None:
        value = value + bias.data[:, None, None]

    def grad_fn(g):
        d_kernel = np.einsum("ohw,chwij->ocij", g, windows, optimize=True)
        d_padded = np.zeros(padded.shape)
        for i in range(k):
            for j in range(k):
                d_padded[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += np.tensordot(
                    kernel.data[:, :, i, j], g, axes=(0, 0)
                )
        d_x = d_padded[:, pad : height - pad, pad : width - pad]
        grads = (d_x, d_kernel)
        if bias is not None:
            grads += (g.sum(axis=(1, 2)),)
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result("conv2d", inputs, value, grad_fn)


def sum_tensors(tensors: Iterable[Tensor]) -> Tensor:
    tensors = list(tensors)
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total
