"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure linking it to its
parents.  Calling ``backward()`` on a scalar walks the graph in reverse
topological order and accumulates gradients into every tensor that requires
them.  Every op validates that its result is finite; NaN/Inf anywhere is an
error, never silent.
"""

from __future__ import annotations

import numpy as np

DIV_EPS = 1e-12

_grad_enabled = True


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


def is_grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that disables graph construction inside its body."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(data: np.ndarray, op_name: str) -> None:
    # cheap first pass: a single inf/nan poisons the sum; re-check elementwise
    # only when the sum overflows legitimately
    s = data.sum()
    if not np.isfinite(s) and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite result in '{op_name}'")


def _as_array(value, dtype) -> np.ndarray:
    if isinstance(value, np.ndarray):
        return value
    return np.asarray(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense real array participating in a reverse-mode gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents = ()
        self._backward = None
        _check_finite(self.data, "tensor")

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward, op_name):
        _check_finite(data, op_name)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        # never accumulate in place: backward closures may hand out views
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor (scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data outside the gradient graph."""
        return Tensor(self.data)

    # -- convenience --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a scalar tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axes=None, keepdims=False):
        return sum_(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return mean(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return abs_(self)

    def exp(self):
        return exp(self)


def _coerce_pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(_as_array(a, b.data.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(_as_array(b, a.data.dtype))
    return a, b


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "add")


def sub(a, b):
    a, b = _coerce_pair(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _coerce_pair(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "mul")


def div(a, b):
    a, b = _coerce_pair(a, b)
    if np.abs(b.data).min() < DIV_EPS:
        raise ZeroDivisionError(f"division by value smaller than {DIV_EPS}")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out_data / b.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "div")


def neg(a):
    out_data = -a.data

    def backward(g):
        a._accum(-g)

    return Tensor._from_op(out_data, (a,), backward, "neg")


def abs_(a):
    out_data = np.abs(a.data)

    def backward(g):
        a._accum(g * np.sign(a.data))

    return Tensor._from_op(out_data, (a,), backward, "abs")


def exp(a):
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return Tensor._from_op(out_data, (a,), backward, "exp")


def sin(a):
    out_data = np.sin(a.data)

    def backward(g):
        a._accum(g * np.cos(a.data))

    return Tensor._from_op(out_data, (a,), backward, "sin")


def cos(a):
    out_data = np.cos(a.data)

    def backward(g):
        a._accum(-g * np.sin(a.data))

    return Tensor._from_op(out_data, (a,), backward, "cos")


def pow2(a):
    out_data = a.data * a.data

    def backward(g):
        a._accum(g * (2.0 * a.data))

    return Tensor._from_op(out_data, (a,), backward, "pow2")


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), backward, "sigmoid")


def minimum(a, b):
    """Elementwise min; on ties the gradient routes to the first operand."""
    a, b = _coerce_pair(a, b)
    out_data = np.minimum(a.data, b.data)

    def backward(g):
        take_a = a.data <= b.data
        if a.requires_grad:
            a._accum(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * (~take_a), b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "minimum")


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first operand."""
    a, b = _coerce_pair(a, b)
    out_data = np.maximum(a.data, b.data)

    def backward(g):
        take_a = a.data >= b.data
        if a.requires_grad:
            a._accum(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * (~take_a), b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "maximum")


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes only where the input was kept."""
    if lo is None and hi is None:
        raise ValueError("clamp requires at least one bound")
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        inside = np.ones(a.data.shape, dtype=bool)
        if lo is not None:
            inside &= a.data >= lo
        if hi is not None:
            inside &= a.data <= hi
        a._accum(g * inside)

    return Tensor._from_op(out_data, (a,), backward, "clamp")


def relu(a):
    return clamp(a, lo=0.0)


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "min": minimum}
_ELEMENTWISE_UNARY = {"abs": abs_, "exp": exp, "neg": neg, "pow2": pow2}


def elementwise(op_kind: str, a, b=None, **kwargs):
    """Dispatch by name: add, sub, mul, div, abs, exp, neg, min, clamp, pow2."""
    if op_kind == "clamp":
        return clamp(a, **kwargs)
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"'{op_kind}' needs two operands")
        return _ELEMENTWISE_BINARY[op_kind](a, b)
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"'{op_kind}' takes one operand")
        return _ELEMENTWISE_UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op '{op_kind}'")


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape):
    old_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(old_shape))

    return Tensor._from_op(out_data, (a,), backward, "reshape")


def slice_(a, index):
    """Basic (non-advanced) indexing with gradient scatter on backward."""
    out_data = a.data[index]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        a._accum(buf)

    return Tensor._from_op(out_data, (a,), backward, "slice")


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat")


def pad2d(a, padding, mode="zero"):
    """Pad the two trailing axes by (top, bottom, left, right)."""
    top, bottom, left, right = padding
    if min(padding) < 0:
        raise ValueError("negative padding")
    np_mode = {"zero": "constant", "edge": "edge", "reflect": "reflect"}[mode]
    pad_width = [(0, 0)] * (a.data.ndim - 2) + [(top, bottom), (left, right)]
    out_data = np.pad(a.data, pad_width, mode=np_mode)
    h, w = a.data.shape[-2], a.data.shape[-1]

    def backward(g):
        if mode == "zero":
            a._accum(g[..., top:top + h, left:left + w])
        elif mode == "edge":
            # padded border cells replicate the edge cell; fold their
            # gradients back onto it, one axis at a time
            gw = g[..., left:left + w].copy()
            if left:
                gw[..., 0] += g[..., :left].sum(axis=-1)
            if right:
                gw[..., -1] += g[..., left + w:].sum(axis=-1)
            gh = gw[..., top:top + h, :].copy()
            if top:
                gh[..., 0, :] += gw[..., :top, :].sum(axis=-2)
            if bottom:
                gh[..., -1, :] += gw[..., top + h:, :].sum(axis=-2)
            a._accum(gh)
        else:
            # reflect: fold each padded cell's gradient onto its mirror source
            buf = np.zeros_like(a.data)
            rows = _pad_source_index(h, top, bottom, mode)
            cols = _pad_source_index(w, left, right, mode)
            np.add.at(buf, (..., rows[:, None], cols[None, :]), g)
            a._accum(buf)

    return Tensor._from_op(out_data, (a,), backward, "pad2d")


def _pad_source_index(n, before, after, mode):
    idx = np.arange(-before, n + after)
    if mode == "edge":
        return np.clip(idx, 0, n - 1)
    # reflect (no repeated edge): map via the period-2(n-1) triangle wave
    period = 2 * (n - 1) if n > 1 else 1
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


# -- reductions ----------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def sum_(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.data.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accum(np.broadcast_to(g, a.data.shape))

    return Tensor._from_op(out_data, (a,), backward, "sum")


def mean(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accum(np.broadcast_to(g, a.data.shape) / count)

    return Tensor._from_op(out_data, (a,), backward, "mean")


def reduce_min(a, axis, keepdims=False):
    """Min over one axis; backward is one-hot at the argmin (lowest index on ties)."""
    axis = axis % a.data.ndim
    if a.data.shape[axis] == 0:
        raise ValueError("min over an empty axis")
    arg = np.argmin(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(arg, axis), g, axis=axis)
        a._accum(buf)

    return Tensor._from_op(out_data, (a,), backward, "reduce_min")


def reduce(op_kind: str, a, axes=None, keepdims=False):
    """Dispatch by name: mean, sum, min (min takes a single axis)."""
    if op_kind == "mean":
        return mean(a, axes, keepdims)
    if op_kind == "sum":
        return sum_(a, axes, keepdims)
    if op_kind == "min":
        if axes is None or isinstance(axes, (tuple, list)):
            raise ValueError("reduce 'min' needs a single axis")
        return reduce_min(a, axes, keepdims)
    raise ValueError(f"unknown reduce op '{op_kind}'")


def swap_last_axes(a):
    """Transpose the two trailing axes."""
    out_data = np.swapaxes(a.data, -1, -2)

    def backward(g):
        a._accum(np.swapaxes(g, -1, -2))

    return Tensor._from_op(out_data, (a,), backward, "swap_last_axes")


# -- linear algebra -------------------------------------------------------------


def matmul(a, b):
    a, b = _coerce_pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "matmul")
