"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records its parents and a backward closure on the output tensor.
``Tensor.backward`` collects the reachable operations into a :class:`Tape` in
topological order and replays it in reverse.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp as _logsumexp

from .errors import DimensionError, SymmetryError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("fragmix_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """
    n-dimensional float64 array that optionally participates in gradient recording
    """
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        tracked = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        out.op = op
        return out

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff --------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf requiring grad"""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output", self.shape)
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError("seed gradient shape differs from output", grad.shape, self.shape)
        Tape.record(self).replay(self, grad)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


class Tape:
    """
    Operations reachable from one output, stored in topological order
    """

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: List[Tensor] = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, output: Tensor, grad: np.ndarray) -> None:
        grads = {id(output): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        # leaves that no path reached still get a (zero) gradient buffer
        for node in self.nodes:
            if node.is_leaf and node.grad is None:
                node.grad = np.zeros_like(node.data)


def record_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Register a custom primitive; ``backward`` maps the output gradient to one gradient per parent"""
    return Tensor._result(data, parents, backward, op)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "const"
    return out


def zeros(shape) -> Tensor:
    return as_tensor(np.zeros(shape))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: operands do not broadcast", a.shape, b.shape) from None


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range", x.shape)
    return axis % x.ndim


# -- elementwise binary ---------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor._result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return Tensor._result(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


# -- elementwise unary ----------------------------------------------------

def neg(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: ArrayLike, exponent: float) -> Tensor:
    x = as_tensor(x)
    exponent = float(exponent)
    return Tensor._result(
        x.data ** exponent, (x,),
        lambda g: (g * exponent * x.data ** (exponent - 1.0),), "pow")


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return Tensor._result(
        x.data * s, (x,),
        lambda g: (g * (s + x.data * s * (1.0 - s)),), "silu")


def clamp_min(x: ArrayLike, lower: float) -> Tensor:
    """max(x, lower); the gradient is blocked where the clamp is active"""
    x = as_tensor(x)
    keep = x.data >= lower
    return Tensor._result(np.where(keep, x.data, lower), (x,), lambda g: (g * keep,), "clamp_min")


# -- reductions -----------------------------------------------------------

def _normalize_axes(x: Tensor, axis) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(_axis(x, a) for a in axes)


def tsum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(x, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)
    return Tensor._result(out, (x,), backward, "sum")


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(x, axis)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def logsumexp(x: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = _axis(x, axis)
    out = _logsumexp(x.data, axis=axis, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x.data - out),)
    return Tensor._result(out if keepdims else np.squeeze(out, axis=axis), (x,), backward, "logsumexp")


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(x, axis)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)
    return Tensor._result(
        out, (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _axis(x, axis)
    out = x.data - _logsumexp(x.data, axis=axis, keepdims=True)
    return Tensor._result(
        out, (x,),
        lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: ArrayLike, weight: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift"""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError("layer_norm: scale/shift must match the last axis", x.shape, weight.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * weight.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return Tensor._result(xhat * weight.data + bias.data, (x, weight, bias), backward, "layer_norm")


# -- stochastic -------------------------------------------------------------

def dropout_keep_mask(shape, rate: float, seed: int, step: int, op_id: int, block: int = 0) -> np.ndarray:
    """Counter-based keep mask: identical for identical (seed, step, op_id, block)"""
    bitgen = np.random.Philox(key=int(seed), counter=[int(step), int(op_id), int(block), 0])
    return np.random.Generator(bitgen).random(shape) >= rate


def dropout(x: ArrayLike, rate: float, key: Tuple[int, int, int], training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise DimensionError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    scale = np.where(dropout_keep_mask(x.shape, rate, *key), 1.0 / (1.0 - rate), 0.0)
    return Tensor._result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# -- shape manipulation -----------------------------------------------------

def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape to {tuple(shape)}", x.shape) from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_axis(x, a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes}", x.shape)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x: ArrayLike, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    a, b = _axis(x, a), _axis(x, b)
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    axis = _axis(parts[0], axis)
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
                p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != axis):
            raise DimensionError("concat: shapes differ off the concatenation axis", parts[0].shape, p.shape)
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return Tensor._result(
        np.concatenate([p.data for p in parts], axis=axis), parts,
        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def getitem(x: ArrayLike, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)
    try:
        out = x.data[index]
    except IndexError as err:
        raise DimensionError(f"invalid index: {err}", x.shape) from None
    return Tensor._result(out, (x,), backward, "getitem")


def scatter_add(src: ArrayLike, index: np.ndarray, n: int) -> Tensor:
    """out[index[e]] += src[e] along the first axis, out has n rows"""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != src.shape[:1]:
        raise DimensionError("scatter_add: one index per source row", index.shape, src.shape)
    out = np.zeros((n,) + src.shape[1:])
    np.add.at(out, index, src.data)
    return Tensor._result(out, (src,), lambda g: (g[index],), "scatter_add")


# -- linear algebra ---------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul: inner extents differ", a.shape, b.shape)
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("matmul: leading batch extents differ", a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return Tensor._result(a.data @ b.data, (a, b), backward, "matmul")


def sym_eig(a: ArrayLike, tol: float = 1e-8) -> Tuple[Tensor, Tensor]:
    """
    Eigendecomposition of a symmetric matrix: ascending eigenvalues, orthonormal
    eigenvectors in columns. Both outputs are differentiable.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError("sym_eig needs a square matrix", a.shape)
    asym = np.max(np.abs(a.data - a.data.T)) if a.size else 0.0
    if asym > tol * max(1.0, float(np.max(np.abs(a.data))) if a.size else 1.0):
        raise SymmetryError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    lam, vec = np.linalg.eigh(0.5 * (a.data + a.data.T))

    gap = lam[None, :] - lam[:, None]
    close = np.abs(gap) < 1e-12 * max(1.0, float(np.max(np.abs(lam))) if lam.size else 1.0)
    with np.errstate(divide="ignore"):
        f = np.where(close, 0.0, 1.0 / np.where(close, 1.0, gap))

    def sym(m):
        return 0.5 * (m + m.T)

    values = Tensor._result(lam, (a,), lambda g: (sym(vec @ np.diag(g) @ vec.T),), "sym_eig.values")
    vectors = Tensor._result(vec, (a,), lambda g: (sym(vec @ (f * (vec.T @ g)) @ vec.T),), "sym_eig.vectors")
    return values, vectors


# -- verification -------------------------------------------------------------

def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5, seed: int = 0) -> float:
    """
    Relative error between the taped gradient and central finite differences.
    Non-scalar outputs are contracted with a fixed random cotangent first.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    first = fn(*[as_tensor(x) for x in arrays])
    cotangent = np.random.default_rng(seed).standard_normal(first.shape)

    def scalar(*xs) -> float:
        with no_grad():
            return float(np.sum(fn(*[as_tensor(x) for x in xs]).data * cotangent))

    leaves = [Tensor(x, requires_grad=True) for x in arrays]
    out = fn(*leaves)
    (out * as_tensor(cotangent)).sum().backward()
    analytic = np.concatenate([leaf.grad.ravel() for leaf in leaves])

    numeric = []
    for i, x in enumerate(arrays):
        for j in range(x.size):
            shifted_up = [y.copy() for y in arrays]
            shifted_dn = [y.copy() for y in arrays]
            shifted_up[i].flat[j] += h
            shifted_dn[i].flat[j] -= h
            numeric.append((scalar(*shifted_up) - scalar(*shifted_dn)) / (2.0 * h))
    numeric = np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
