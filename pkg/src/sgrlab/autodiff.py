"""Reverse-mode automatic differentiation on numpy float64 arrays.

Every op's vector-Jacobian product is itself written with differentiable
ops, so a gradient can be built as a graph node (``create_graph=True``) and
differentiated again.  That is what gradient penalties need: the input
gradient of a log-probability becomes part of the training objective and is
then differentiated with respect to the parameters.

Ops that only know how to produce a numeric gradient set
``second_order = False``; meeting one while building a differentiable
gradient raises :class:`UnsupportedOpError` rather than returning zeros.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, UnsupportedOpError

__all__ = [
    "Tensor",
    "tensor",
    "as_tensor",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "backward",
    "grad_as_node",
    "finite_diff_check",
    "log_softmax",
    "logsumexp",
    "softmax",
    "relu",
    "im2col",
    "max_pool2d",
    "linear_operator",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: ops executed inside record no graph."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """A float64 array plus the graph record needed to differentiate it.

    Leaves are created directly; every other tensor remembers the op that
    produced it and its parent tensors.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op: Op | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.name = name

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.op.name}" if self.op is not None else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return _apply(Add(), self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _apply(Add(), self, -as_tensor(other))

    def __rsub__(self, other):
        return _apply(Add(), as_tensor(other), -self)

    def __mul__(self, other):
        return _apply(Mul(), self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _apply(Div(), self, as_tensor(other))

    def __rtruediv__(self, other):
        return _apply(Div(), as_tensor(other), self)

    def __neg__(self):
        return _apply(Neg(), self)

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise ContractError("only constant exponents are supported")
        return _apply(Pow(float(p)), self)

    def __matmul__(self, other):
        return _apply(MatMul(), self, as_tensor(other))

    def __rmatmul__(self, other):
        return _apply(MatMul(), as_tensor(other), self)

    # -- shape ops --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return _apply(Sum(axis, keepdims), self)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _apply(Reshape(tuple(shape)), self)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _apply(Transpose(tuple(axes)), self)

    @property
    def T(self):
        return self.transpose()

    def broadcast_to(self, shape):
        return _apply(BroadcastTo(tuple(shape)), self)

    def sum_to(self, shape):
        return _apply(SumTo(tuple(shape)), self)

    # -- elementwise ------------------------------------------------------
    def exp(self):
        return _apply(Exp(), self)

    def log(self):
        return _apply(Log(), self)

    def relu(self):
        return _apply(ReLU(), self)

    def abs(self):
        return _apply(Abs(), self)

    def clip(self, lo, hi):
        return _apply(Clip(lo, hi), self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


class Op:
    """Base class. ``forward`` works on arrays, ``vjp`` on Tensors."""

    name = "op"
    second_order = True

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, g: Tensor, out: Tensor, *xs: Tensor) -> Sequence[Tensor | None]:
        raise NotImplementedError


def _apply(op: Op, *inputs: Tensor) -> Tensor:
    out = Tensor(op.forward(*(t.data for t in inputs)))
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.parents = inputs
    return out


def _unbroadcast(g: Tensor, shape) -> Tensor:
    return g if g.shape == tuple(shape) else g.sum_to(shape)


class Add(Op):
    name = "add"

    def forward(self, a, b):
        return a + b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a

    def vjp(self, g, out, a):
        return (-g,)


class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def vjp(self, g, out, a, b):
        ga = _unbroadcast(g * b, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Op):
    name = "div"

    def forward(self, a, b):
        return a / b

    def vjp(self, g, out, a, b):
        ga = _unbroadcast(g / b, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-(g * a) / (b * b), b.shape) if b.requires_grad else None
        return ga, gb


class Pow(Op):
    name = "pow"

    def __init__(self, p: float):
        self.p = p

    def forward(self, a):
        return a ** self.p

    def vjp(self, g, out, a):
        if self.p == 1.0:
            return (g,)
        return (g * (a ** (self.p - 1.0)) * self.p,)


class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ContractError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return a @ b

    def vjp(self, g, out, a, b):
        ga = g @ b.T if a.requires_grad else None
        gb = a.T @ g if b.requires_grad else None
        return ga, gb


class Sum(Op):
    name = "sum"

    def __init__(self, axis, keepdims):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        self.in_shape = a.shape
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def vjp(self, g, out, a):
        if self.axis is not None and not self.keepdims:
            axes = tuple(ax % len(self.in_shape) for ax in np.atleast_1d(self.axis))
            kshape = tuple(1 if i in axes else s for i, s in enumerate(self.in_shape))
            g = g.reshape(kshape)
        elif self.axis is None and not self.keepdims:
            g = g.reshape((1,) * len(self.in_shape))
        return (g.broadcast_to(self.in_shape),)


class BroadcastTo(Op):
    name = "broadcast_to"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        self.in_shape = a.shape
        return np.broadcast_to(a, self.shape).copy()

    def vjp(self, g, out, a):
        return (g.sum_to(self.in_shape),)


class SumTo(Op):
    """Adjoint of broadcasting: sum ``a`` down to ``shape``."""

    name = "sum_to"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        self.in_shape = a.shape
        lead = a.ndim - len(self.shape)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, s in enumerate(self.shape) if s == 1 and a.shape[lead + i] != 1
        )
        r = np.sum(a, axis=axes, keepdims=True)
        return r.reshape(self.shape)

    def vjp(self, g, out, a):
        return (g.broadcast_to(self.in_shape),)


class Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.shape)

    def vjp(self, g, out, a):
        return (g.reshape(self.in_shape),)


class Transpose(Op):
    name = "transpose"

    def __init__(self, axes):
        self.axes = axes

    def forward(self, a):
        return np.transpose(a, self.axes)

    def vjp(self, g, out, a):
        return (g.transpose(tuple(np.argsort(self.axes))),)


class Exp(Op):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def vjp(self, g, out, a):
        return (g * out,)


class Log(Op):
    name = "log"

    def forward(self, a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def vjp(self, g, out, a):
        return (g / a,)


class ReLU(Op):
    # derivative at exactly 0 is 0
    name = "relu"

    def forward(self, a):
        self.mask = (a > 0).astype(np.float64)
        return a * self.mask

    def vjp(self, g, out, a):
        return (g * Tensor(self.mask),)


class Abs(Op):
    name = "abs"
    second_order = False

    def forward(self, a):
        return np.abs(a)

    def vjp(self, g, out, a):
        return (Tensor(g.data * np.sign(a.data)),)


class Clip(Op):
    name = "clip"
    second_order = False

    def __init__(self, lo, hi):
        self.lo, self.hi = lo, hi

    def forward(self, a):
        return np.clip(a, self.lo, self.hi)

    def vjp(self, g, out, a):
        inside = (a.data >= self.lo) & (a.data <= self.hi)
        return (Tensor(g.data * inside),)


class Im2Col(Op):
    """NHWC image batch -> (N*OH*OW, KH*KW*C) patch matrix, valid padding, stride 1."""

    name = "im2col"

    def __init__(self, kh, kw, in_shape=None):
        self.kh, self.kw = kh, kw
        self.in_shape = in_shape

    def forward(self, a):
        if a.ndim != 4:
            raise ContractError(f"im2col expects NHWC input, got shape {a.shape}")
        self.in_shape = a.shape
        n, h, w, c = a.shape
        oh, ow = h - self.kh + 1, w - self.kw + 1
        if oh < 1 or ow < 1:
            raise ContractError(f"kernel {self.kh}x{self.kw} larger than image {h}x{w}")
        win = sliding_window_view(a, (self.kh, self.kw), axis=(1, 2))  # n, oh, ow, c, kh, kw
        win = win.transpose(0, 1, 2, 4, 5, 3)
        return np.ascontiguousarray(win).reshape(n * oh * ow, self.kh * self.kw * c)

    def vjp(self, g, out, a):
        return (_apply(Col2Im(self.kh, self.kw, self.in_shape), g),)


class Col2Im(Op):
    """Adjoint of :class:`Im2Col` (scatter-add of patches back into images)."""

    name = "col2im"

    def __init__(self, kh, kw, img_shape):
        self.kh, self.kw = kh, kw
        self.img_shape = img_shape

    def forward(self, cols):
        n, h, w, c = self.img_shape
        oh, ow = h - self.kh + 1, w - self.kw + 1
        cols = cols.reshape(n, oh, ow, self.kh, self.kw, c)
        img = np.zeros(self.img_shape)
        for i in range(self.kh):
            for j in range(self.kw):
                img[:, i:i + oh, j:j + ow, :] += cols[:, :, :, i, j, :]
        return img

    def vjp(self, g, out, cols):
        return (_apply(Im2Col(self.kh, self.kw), g),)


class Gather(Op):
    """Select flat positions ``idx`` of the input; output has ``idx.shape``."""

    name = "gather"

    def __init__(self, idx, tag="gather"):
        self.idx = idx
        self.name = tag

    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(-1)[self.idx]

    def vjp(self, g, out, a):
        return (_apply(Scatter(self.idx, self.in_shape), g),)


class Scatter(Op):
    """Adjoint of :class:`Gather`: add values into a zero array at ``idx``."""

    name = "scatter"

    def __init__(self, idx, shape):
        self.idx = idx
        self.shape = shape

    def forward(self, v):
        flat = np.zeros(int(np.prod(self.shape)))
        np.add.at(flat, self.idx.reshape(-1), v.reshape(-1))
        return flat.reshape(self.shape)

    def vjp(self, g, out, v):
        return (_apply(Gather(self.idx), g),)


class LinearOperator(Op):
    """Apply a fixed linear map; its vjp applies the adjoint map."""

    def __init__(self, fn, adjoint, name="linear_operator"):
        self.fn, self.adjoint = fn, adjoint
        self.name = name

    def forward(self, a):
        return np.asarray(self.fn(a), dtype=np.float64)

    def vjp(self, g, out, a):
        return (_apply(LinearOperator(self.adjoint, self.fn, self.name), g),)


# -- composite helpers ----------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return x.relu()


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    # the shift is a constant: its contribution to the gradient cancels exactly
    m = Tensor(np.max(x.data, axis=axis, keepdims=True))
    return (x - m).exp().sum(axis=axis, keepdims=True).log() + m


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = x - m
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis).exp()


def im2col(x: Tensor, kh: int, kw: int) -> Tensor:
    return _apply(Im2Col(kh, kw), x)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over NHWC input; trailing rows/cols dropped.

    Ties go to the first element in row-major order inside each window.
    """
    n, h, w, c = x.shape
    oh, ow = h // size, w // size
    a = x.data[:, : oh * size, : ow * size, :]
    win = a.reshape(n, oh, size, ow, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, size * size)
    k = np.argmax(win, axis=-1)  # first max wins
    di, dj = np.divmod(k, size)
    ni = np.arange(n)[:, None, None, None]
    ii = np.arange(oh)[None, :, None, None] * size + di
    jj = np.arange(ow)[None, None, :, None] * size + dj
    cc = np.arange(c)[None, None, None, :]
    idx = ((ni * h + ii) * w + jj) * c + cc
    return _apply(Gather(idx, tag="max_pool"), x)


def linear_operator(x: Tensor, fn: Callable, adjoint: Callable | None = None, name: str = "linear_operator") -> Tensor:
    """Apply a constant linear map ``fn`` to ``x`` inside the graph.

    ``adjoint`` defaults to ``fn`` (self-adjoint maps such as symmetric matrices).
    """
    return _apply(LinearOperator(fn, adjoint or fn, name), x)


# -- the backward engine --------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(root: Tensor, wrt: Sequence[Tensor] | Tensor, grad_output: Tensor | None = None,
         create_graph: bool = False) -> list[Tensor] | Tensor:
    """Gradients of ``root`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned tensors are graph nodes and can be
    differentiated again. Tensors not reachable from ``root`` get zeros.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if grad_output is None:
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grad_output = Tensor(np.ones_like(root.data))
    target_ids = {id(t) for t in targets}

    order = _topo_order(root)
    reaches: dict[int, bool] = {}
    for node in order:
        reaches[id(node)] = id(node) in target_ids or any(reaches.get(id(p), False) for p in node.parents)

    grads: dict[int, Tensor] = {}
    if reaches.get(id(root)):
        grads[id(root)] = grad_output
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.op is None or not reaches[id(node)]:
                continue
            if not any(reaches[id(p)] for p in node.parents):
                continue
            if create_graph and not node.op.second_order:
                raise UnsupportedOpError(node.op.name)
            pgrads = node.op.vjp(g, node, *node.parents)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad or not reaches[id(p)]:
                    continue
                if not np.all(np.isfinite(pg.data)):
                    raise NumericError(f"non-finite gradient produced by op {node.op.name!r}", op=node.op.name)
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    out = [grads.get(id(t), Tensor(np.zeros_like(t.data))) for t in targets]
    return out[0] if single else out


def backward(root: Tensor, leaves: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Map each leaf to the numeric gradient of scalar ``root``."""
    leaves = list(leaves)
    gs = grad(root, leaves)
    return {leaf: g.data for leaf, g in zip(leaves, gs)}


def grad_as_node(root: Tensor, wrt: Tensor) -> Tensor:
    """Gradient of ``root`` w.r.t. ``wrt`` as a differentiable graph node."""
    return grad(root, wrt, create_graph=True)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, floor: float = 1e-7) -> float:
    """Max relative error between autodiff and central differences of scalar ``f``.

    The error is |a - n| / max(|a| + |n|, floor); the floor keeps entries that
    are zero up to differencing noise from dominating.
    """
    x = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    analytic = grad(f(xt), xt).data.reshape(-1)
    flat = x.reshape(-1)
    numeric = np.empty_like(flat)
    # f may itself take gradients (penalty terms), so graph recording stays on
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        fp = f(Tensor((flat + e).reshape(x.shape))).item()
        fm = f(Tensor((flat - e).reshape(x.shape))).item()
        numeric[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(err.max()) if err.size else 0.0
