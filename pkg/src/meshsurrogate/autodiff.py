"""Minimal reverse-mode autodiff over a dynamically recorded tape.

Everything is float64. A :class:`Tensor` wraps a numpy array plus the
closures needed to push gradients back to its parents. Ops cover exactly
what the surrogate networks need: (batched) matmul, sparse node-axis
matmul, elementwise arithmetic, ELU, reshape/concat/slice, and mean-square
reductions.
"""

from __future__ import annotations

import struct
from typing import Callable

import numpy as np
import scipy.sparse as sp


class Tensor:
    """Node in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward",
                 "_needs")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        # backward skips subgraphs with no trainable leaves underneath
        self._needs = requires_grad or any(p._needs for p in _parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.value + other.value, _parents=(self, other))

        def backward(g):
            return _unbroadcast(g, self.value.shape), _unbroadcast(g, other.value.shape)

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, _parents=(self,))
        out._backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.value * other.value, _parents=(self, other))

        def backward(g):
            return (_unbroadcast(g * other.value, self.value.shape),
                    _unbroadcast(g * self.value, other.value.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, Tensor._lift(other))

    def reshape(self, *shape):
        out = Tensor(self.value.reshape(*shape), _parents=(self,))
        out._backward = lambda g: (g.reshape(self.value.shape),)
        return out

    # -- reverse pass ----------------------------------------------------

    def backward(self, grad=None):
        """Accumulate gradients of a scalar (or given seed) into the graph."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed requires a scalar")
            grad = np.ones_like(self.value)
        if not self._needs:
            return
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._needs and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent._needs:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _unbroadcast(grad, shape):
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2D @ 2D or batched 3D @ 2D (channel mixing)."""
    out = Tensor(a.value @ b.value, _parents=(a, b))

    def backward(g):
        ga = g @ b.value.T if a._needs else None
        gb = None
        if b._needs:
            if a.value.ndim == 3 and b.value.ndim == 2:
                # collapse the leading axes so BLAS does the contraction
                gb = a.value.reshape(-1, a.value.shape[-1]).T \
                    @ g.reshape(-1, g.shape[-1])
            else:
                gb = a.value.T @ g
        return ga, gb

    out._backward = backward
    return out


def spmm_nodes(mat: sp.spmatrix, x: Tensor) -> Tensor:
    """Multiply a constant sparse matrix along the node axis.

    Accepts (n, c) signals or (batch, n, c) stacks; the matrix is applied
    to the node dimension only.
    """
    mat = mat.tocsr()

    def apply(m, v):
        if v.ndim == 2:
            return m @ v
        b, n, c = v.shape
        flat = v.transpose(1, 0, 2).reshape(n, b * c)
        out = m @ flat
        return out.reshape(m.shape[0], b, c).transpose(1, 0, 2)

    out = Tensor(apply(mat, x.value), _parents=(x,))
    mat_t = mat.T.tocsr()
    out._backward = lambda g: (apply(mat_t, g),)
    return out


def spmm_front(mat: sp.spmatrix, x: Tensor, mat_t: sp.spmatrix = None) -> Tensor:
    """Multiply a constant sparse matrix along the leading (node) axis.

    For node-first layouts (n, ...) the trailing axes flatten to a
    contiguous view, so no transposes are needed. ``mat_t`` lets callers
    reuse a precomputed transpose across many applications.
    """
    mat = mat.tocsr()

    def apply(m, v):
        rest = v.shape[1:]
        out = m @ np.ascontiguousarray(v).reshape(v.shape[0], -1)
        return out.reshape((m.shape[0],) + rest)

    out = Tensor(apply(mat, x.value), _parents=(x,))
    if mat_t is None:
        mat_t = mat.T.tocsr()
    out._backward = lambda g: (apply(mat_t, g),)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the leading axis, scattering gradients back."""
    out = Tensor(x.value[start:stop], _parents=(x,))

    def backward(g):
        gx = np.zeros_like(x.value)
        gx[start:stop] = g
        return (gx,)

    out._backward = backward
    return out


def swap_nodes_batch(x: Tensor) -> Tensor:
    """Exchange the two leading axes: (batch, n, c) <-> (n, batch, c)."""
    out = Tensor(np.ascontiguousarray(x.value.swapaxes(0, 1)), _parents=(x,))
    out._backward = lambda g: (g.swapaxes(0, 1),)
    return out


def take_nodes(x: Tensor, indices: np.ndarray) -> Tensor:
    """Row selection along the node axis (second-to-last); the differentiable
    form of applying a binary selection matrix."""
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor(np.take(x.value, indices, axis=-2), _parents=(x,))
    distinct = np.unique(indices).size == indices.size

    def backward(g):
        gx = np.zeros_like(x.value)
        if distinct:
            gx[..., indices, :] = g
        else:
            np.add.at(gx, (..., indices, slice(None)), g)
        return (gx,)

    out._backward = backward
    return out


def elu(x: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise; derivative 1 at 0."""
    pos = x.value > 0
    ex = np.exp(np.minimum(x.value, 0.0))
    out = Tensor(np.where(pos, x.value, ex - 1.0), _parents=(x,))
    out._backward = lambda g: (g * np.where(pos, 1.0, ex),)
    return out


def concat(tensors, axis=-1) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out._backward = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def mean_square(x: Tensor) -> Tensor:
    """mean(x**2) over all elements; the workhorse of the losses."""
    out = Tensor(np.mean(x.value ** 2), _parents=(x,))
    out._backward = lambda g: (g * 2.0 * x.value / x.value.size,)
    return out


class ParamStore:
    """Named trainable tensors with stable ordering and a frozen-name set.

    Frozen parameters behave as constants: they never receive gradients and
    optimizers skip them.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def adopt(self, other: "ParamStore", prefix: str = "") -> None:
        """Merge another store's parameters (preserving frozen state)."""
        for name, t in other._params.items():
            full = prefix + name
            if full in self._params:
                raise ValueError(f"duplicate parameter name {full!r}")
            self._params[full] = t
            if name in other._frozen:
                self._frozen.add(full)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def freeze(self, names=None) -> None:
        for name in (self._params if names is None else names):
            self._frozen.add(name)
            self._params[name].requires_grad = False
            self._params[name]._needs = False

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self):
        return [(n, t) for n, t in self._params.items() if n not in self._frozen]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.value.size for t in self._params.values())

    # -- MHW1 checkpoint container --------------------------------------
    # magic "MHW1"; per parameter: u32 name length, name bytes, u32 rank,
    # u32 dims, float64 little-endian values. Stable parameter ordering
    # gives bit-exact round trips.

    MAGIC = b"MHW1"

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            for name, t in self._params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", t.value.ndim))
                fh.write(struct.pack(f"<{t.value.ndim}I", *t.value.shape))
                fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != cls.MAGIC:
            raise ValueError(f"{path}: not an MHW1 checkpoint")
        off = 4
        while off < len(data):
            try:
                (nlen,) = struct.unpack_from("<I", data, off)
                off += 4
                name = data[off:off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<I", data, off)
                off += 4
                dims = struct.unpack_from(f"<{rank}I", data, off)
                off += 4 * rank
                count = int(np.prod(dims)) if rank else 1
                if off + 8 * count > len(data):
                    raise struct.error("short read")
                vals = np.frombuffer(data, dtype="<f8", count=count, offset=off)
                off += 8 * count
            except struct.error as exc:
                raise ValueError(f"{path}: truncated MHW1 checkpoint") from exc
            store.add(name, vals.reshape(dims).copy())
        return store


def grad_check(loss_fn: Callable[[], Tensor], store: ParamStore,
               epsilon: float = 1e-6, floor: float = 1e-3) -> float:
    """Max relative error of reverse-mode vs central finite differences.

    Checks every entry of every parameter (frozen parameters must report an
    exact zero gradient). ``loss_fn`` must rebuild the graph on each call.

    The denominator is floored at ``floor``: central differences of a
    unit-scale loss carry ~1e-10 absolute round-off at the default epsilon,
    so near-zero gradients are compared absolutely at that scale instead of
    amplifying noise into a meaningless relative figure.
    """
    store.zero_grad()
    loss_fn().backward()
    max_err = 0.0
    for name in store.names():
        t = store[name]
        analytic = t.grad if t.grad is not None else np.zeros_like(t.value)
        if store.is_frozen(name):
            if t.grad is not None and np.any(t.grad != 0):
                return np.inf
            continue
        flat = t.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(loss_fn().value)
            flat[i] = orig - epsilon
            lo = float(loss_fn().value)
            flat[i] = orig
            numeric = (hi - lo) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), floor)
            max_err = max(max_err, abs(a - numeric) / denom)
    return max_err
