"""Dense float64 tensors with reverse-mode automatic differentiation.

Each op returns a new :class:`Tensor` holding references to its inputs and
a closure that maps the output gradient onto input gradients. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once, in
reverse topological order, and then marks it consumed.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12

ArrayLike = Union[np.ndarray, float, int, Sequence]


class GraphError(RuntimeError):
    """Raised on invalid use of the op graph (double backward, non-scalar loss)."""


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class _Node:
    """One recorded op: its inputs, a backward rule, and a consumed flag."""

    __slots__ = ("inputs", "backward", "consumed")

    def __init__(self, inputs: Tuple["Tensor", ...], backward: Callable[[np.ndarray], Tuple]):
        self.inputs = inputs
        self.backward = backward
        self.consumed = False


class Tensor:
    """A float64 array plus optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    # -- construction helpers ---------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, inputs: Tuple["Tensor", ...], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        out._node = _Node(inputs, backward) if out.requires_grad else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it; consumes the graph."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._node is None:
            if not self.requires_grad:
                raise GraphError("loss does not depend on any tensor requiring grad")
            self.grad = np.ones_like(self.data)
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                if t._node.consumed:
                    raise GraphError("graph already consumed by a previous backward()")
                for inp in t._node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))

        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if t._node is None:
                if g is not None:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            node = t._node
            node.consumed = True
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig

    # -- operator sugar -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def __getitem__(self, idx):
        return index(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor._from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor._from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return Tensor._from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return Tensor._from_op(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    """Natural log; domain is x > 0."""
    if np.any(x.data <= 0):
        raise ValueError("log() of non-positive value")
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# -- reductions and shape ---------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[idx], dtype=np.float64), (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor._from_op(
        out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    )


def amax(x: Tensor, axis: int) -> Tuple[Tensor, np.ndarray]:
    """Max along one axis; ties go to the first occurrence. Returns values and argmax."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._from_op(out, (x,), backward), idx


# -- linear algebra ---------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape[-1]} vs {b.shape[-2]}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map along the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input last axis {x.shape[-1]} != weight in-features {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, inputs, backward)


def _pair(v) -> Tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation over NCHW input.

    ``stride`` and ``padding`` accept an int or an (h, w) pair.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"conv2d channel axis mismatch: input C={c}, weight C={cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError("stride must be >= 1")
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp} (axes H, W)")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    # (n, c, ho, wo, kh, kw) view -> (n*ho*wo, c*kh*kw) columns
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if bias is not None:
            return gx, gw, g2.sum(axis=0)
        return gx, gw

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(np.ascontiguousarray(out), inputs, backward)


# -- norms and similarity -----------------------------------------------------------------


def l2norm(x: Tensor, axis: int = -1, keepdims: bool = False, eps: float = NORM_EPS) -> Tensor:
    """Euclidean norm along ``axis`` with a floor of ``eps``.

    Below the floor the output is constant, so its gradient is zero.
    """
    raw = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    floored = raw < eps
    if np.any(floored):
        logger.debug("l2norm: %d vector(s) hit the epsilon floor", int(floored.sum()))
    n = np.maximum(raw, eps)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(floored, 0.0, g * x.data / n),)

    out = n if keepdims else n.squeeze(axis)
    return Tensor._from_op(out, (x,), backward)


def normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    return div(x, l2norm(x, axis=axis, keepdims=True, eps=eps))


def cosine_sim(u: Tensor, v: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Cosine similarity along the last axis (broadcasting over leading axes)."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine_sim: feature dims differ ({u.shape[-1]} vs {v.shape[-1]})")
    dot = tsum(mul(u, v), axis=-1)
    return div(dot, mul(l2norm(u, eps=eps), l2norm(v, eps=eps)))


def spatial_max(x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Per-channel max over an (C, H, W) grid.

    Returns the (C,) values and a (C, 2) array of (row, col) argmax positions,
    first occurrence in row-major order on ties.
    """
    if x.ndim != 3:
        raise DimensionError(f"spatial_max expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    vals, flat = amax(reshape(x, (c, h * w)), axis=1)
    return vals, np.stack(np.unravel_index(flat, (h, w)), axis=1)


def spatial_avg(x: Tensor) -> Tensor:
    """Per-channel mean over the trailing two (spatial) axes."""
    return mean(x, axis=(-2, -1))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = sub(x, Tensor(m))
    return add(log(tsum(exp(shifted), axis=axis)), Tensor(m.squeeze(axis)))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return sub(x, reshape(logsumexp(x, axis), _keep_shape(x.shape, axis)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))


def _keep_shape(shape, axis):
    s = list(shape)
    s[axis] = 1
    return tuple(s)
