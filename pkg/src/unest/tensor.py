"""Reverse-mode automatic differentiation over NumPy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when produced by a differentiable
primitive, remembers the primitive and its parents.  :func:`backward` walks the
recorded graph in reverse topological order and accumulates gradients into the
leaves.

Primitives are subclasses of :class:`Function` with a ``forward`` that works on
raw arrays and a ``backward`` (the adjoint) mapping the output cotangent to one
cotangent per input.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Function",
    "MissingAdjointError",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "tensor",
    "parameter",
]

_state = {"grad_enabled": True, "dtype": np.dtype(np.float32)}


class MissingAdjointError(RuntimeError):
    """Raised when backward reaches a primitive that has no adjoint."""


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


class Context:
    """Per-node record of the producing primitive and anything it saved."""

    def __init__(self):
        self.fn: type[Function] | None = None
        self.parents: tuple[Tensor, ...] = ()

    def save(self, **kwargs):
        for k, v in kwargs.items():
            setattr(self, k, v)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._ctx: Context | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str | None:
        return None if self._ctx is None else self._ctx.fn.name

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        extra = f", op={self.op}" if self._ctx is not None else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}{extra})"

    def __len__(self):
        return len(self.data)

    def backward(self, inputs: Sequence["Tensor"] | None = None):
        return backward(self, inputs)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- shape ---------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=axes)

    def transpose(self, a: int = -2, b: int = -1):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return Permute.apply(self, axes=tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in _axes(axis)]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data) -> Tensor:
    """A trainable leaf in the default dtype."""
    return Tensor(np.asarray(data, dtype=_state["dtype"]), requires_grad=True)


def _axes(axis) -> tuple[int, ...]:
    return (axis,) if isinstance(axis, int) else tuple(axis)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Function:
    """Base class for differentiable primitives."""

    name = "function"

    @staticmethod
    def forward(ctx: Context, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def has_adjoint(cls) -> bool:
        return cls.backward is not Function.backward

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        ref = next((x for x in inputs if isinstance(x, Tensor)), None)
        dtype = ref.dtype if ref is not None else _state["dtype"]
        tensors = tuple(x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype)) for x in inputs)
        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        track = _state["grad_enabled"] and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=track)
        if track:
            ctx.fn = cls
            ctx.parents = tensors
            result._ctx = ctx
        return result


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            if not node._ctx.fn.has_adjoint():
                raise MissingAdjointError(f"no adjoint registered for op '{node._ctx.fn.name}'")
            for p in reversed(node._ctx.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor, inputs: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a mapping leaf -> gradient.  Leaves listed in ``inputs`` that are
    not reachable from ``root`` receive a zero gradient.
    """
    if root.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not require grad; nothing to differentiate")
    order = _topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = np.array(g, dtype=node.dtype) if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        ctx = node._ctx
        parent_grads = ctx.fn.backward(ctx, g)
        if not isinstance(parent_grads, tuple):
            parent_grads = (parent_grads,)
        for p, pg in zip(ctx.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for leaf in inputs or ():
        if leaf not in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaves[leaf] = leaf.grad
    return leaves


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(sa=a.shape, sb=b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(g, ctx.sb)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(sa=a.shape, sb=b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(-g, ctx.sb)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g * ctx.b, ctx.a.shape), _unbroadcast(g * ctx.a, ctx.b.shape)


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a / b

    @staticmethod
    def backward(ctx, g):
        ga = g / ctx.b
        gb = -g * ctx.a / (ctx.b * ctx.b)
        return _unbroadcast(ga, ctx.a.shape), _unbroadcast(gb, ctx.b.shape)


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class Pow(Function):
    name = "pow"

    @staticmethod
    def forward(ctx, a, exponent):
        ctx.save(a=a, p=exponent)
        return a**exponent

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.p * ctx.a ** (ctx.p - 1),)


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.out,)


class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        ctx.save(a=a)
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.a,)


class MatMul(Function):
    """Matrix product over the trailing two axes with batch broadcasting."""

    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")
        ctx.save(a=a, b=b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape):
        ctx.save(shape_in=a.shape)
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape_in),)


class Permute(Function):
    name = "permute"

    @staticmethod
    def forward(ctx, a, axes):
        axes = tuple(ax % a.ndim for ax in axes)
        if sorted(axes) != list(range(a.ndim)):
            raise ValueError(f"invalid permutation {axes} for {a.ndim} dims")
        ctx.save(inv=tuple(np.argsort(axes)))
        return a.transpose(axes)

    @staticmethod
    def backward(ctx, g):
        return (g.transpose(ctx.inv),)


def _has_advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


class GetItem(Function):
    name = "slice"

    @staticmethod
    def forward(ctx, a, index):
        ctx.save(shape_in=a.shape, dtype=a.dtype, index=index)
        return a[index]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape_in, dtype=ctx.dtype)
        if _has_advanced(ctx.index):
            np.add.at(out, ctx.index, g)
        else:
            out[ctx.index] = g
        return (out,)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx.save(axis=axis, sizes=[x.shape[axis] for x in arrays])
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        cuts = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=ctx.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(shape_in=a.shape, axis=axis, keepdims=keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, tuple(a % len(ctx.shape_in) for a in _axes(ctx.axis)))
        return (np.broadcast_to(g, ctx.shape_in),)
