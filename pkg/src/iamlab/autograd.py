"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive builds a node holding references to its inputs and a closure
mapping the upstream gradient to per-input gradients.  :func:`backward` walks
the recorded graph in reverse topological order, visiting each node once.

Forward contractions go through ``np.einsum`` rather than BLAS: BLAS kernels
are chosen by matrix shape, so the same row can round differently depending on
how many rows share the call.  einsum keeps each output row a function of
that row alone, which is what makes rollout replay bit-exact.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

_grad_enabled = True
_debug = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(enabled: bool) -> None:
    """Toggle the finiteness assertion run after every primitive."""
    global _debug
    _debug = bool(enabled)


def debug_enabled() -> bool:
    return _debug


@contextmanager
def debug_mode(enabled: bool = True):
    prev = _debug
    set_debug(enabled)
    try:
        yield
    finally:
        set_debug(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            pass
        elif 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if _debug and not np.isfinite(arr).all():
            raise NumericError(f"non-finite entries in tensor {name!r}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by constants")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_scalar():
    raise ShapeError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _debug and not np.isfinite(data).all():
        raise NumericError(f"non-finite output from {getattr(backward, '__qualname__', 'op')}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- binary elementwise ----------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _node(a.data + b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return _node(a + b.data, (b,), lambda g: (g,))
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _node(a.data - b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return _node(a - b.data, (b,), lambda g: (-g,))
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.data.shape, b.data.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = b
        return _node(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        c = a
        return _node(c * b.data, (b,), lambda g: (g * c,))
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data <= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


# -- unary elementwise -----------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DomainError("log of non-positive entry")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# -- contractions ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an ``m x k`` and a ``k x n`` matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _node(np.einsum("ik,kj->ij", ad, bd), (a, b),
                 lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` is ``out x in``."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight in-dim {W.shape[1]}")
    xd, Wd = x.data, W.data
    x2 = np.ascontiguousarray(xd.reshape(-1, xd.shape[-1]))
    y = np.einsum("ij,oj->io", x2, Wd).reshape(*xd.shape[:-1], Wd.shape[0])
    if b is not None:
        y = y + b.data
        parents = (x, W, b)
    else:
        parents = (x, W)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ Wd).reshape(xd.shape)
        gW = g2.T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _node(y, parents, backward)


# -- reductions and shape plumbing -----------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.data.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(y, dtype=np.float64), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.data.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {shape}") from None
    return _node(y, (x,), lambda g: (g.reshape(src),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.data.shape
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from None
    return _node(y, (x,), lambda g: (_unbroadcast(g, src),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    src = x.data.shape
    y = x.data[index]
    basic = _is_basic(index)

    def backward(g):
        out = np.zeros(src)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(np.array(y, dtype=np.float64), (x,), backward)


def take(x: Tensor, indices: Sequence[int], axis: int = -1) -> Tensor:
    """Gather entries along ``axis`` (duplicates allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    n = x.data.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis of length {n}")
    src = x.data.shape
    ax = axis % x.ndim

    def backward(g):
        out = np.zeros(src)
        sl = [slice(None)] * len(src)
        sl[ax] = idx
        np.add.at(out, tuple(sl), g)
        return (out,)

    return _node(np.take(x.data, idx, axis=ax), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    ax = axis % y.ndim
    bounds = np.cumsum([t.data.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(y, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty list")
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    ax = axis % y.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _node(y, tuple(tensors), backward)


# -- softmax family ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("log_softmax of an empty vector")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), backward)


# -- backward pass -----------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Gradients of a scalar ``loss`` with respect to every leaf on its graph.

    Returns ``{parameter: ndarray}``.  When ``params`` is given, every one of
    them appears in the result, with zeros for those the loss does not reach.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topological(loss)):
            if node._backward is None:
                leaves[id(node)] = node
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        out[leaf] = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64).reshape(leaf.data.shape)
    if params is not None:
        for p in params:
            if p not in out:
                out[p] = np.zeros_like(p.data)
    for leaf, g in out.items():
        leaf.grad = g
        if _debug and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {leaf.name or 'parameter'}")
    return out


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
                      max_coords: int | None = None, rng: np.random.Generator | None = None,
                      stencil: int = 3) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` must rebuild its graph from the current contents of ``params`` on
    every call.  The relative error of one coordinate is
    ``|a - b| / max(|a|, |b|, 1e-8)``.  ``stencil`` selects the 3-point or the
    5-point central formula; the latter resolves near-zero gradients that
    3-point rounding noise (~eps/h) would swamp.  ``max_coords`` subsamples
    coordinates per parameter.
    """
    if stencil not in (3, 5):
        raise ContractError("stencil must be 3 or 5")
    params = list(params)
    grads = backward(f(), params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        g = grads[p].reshape(-1)
        for i in coords:
            orig = flat[i]
            vals = {}
            with no_grad():
                for k in ((1, -1) if stencil == 3 else (2, 1, -1, -2)):
                    flat[i] = orig + k * h
                    vals[k] = float(f().data)
            flat[i] = orig
            # difference symmetric pairs first so an unused coordinate gives exactly 0
            if stencil == 3:
                num = (vals[1] - vals[-1]) / (2.0 * h)
            else:
                num = (8.0 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12.0 * h)
            a = g[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
