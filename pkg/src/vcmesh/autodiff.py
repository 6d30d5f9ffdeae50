"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Each primitive builds its output ``Tensor`` together with a closure that maps
the output adjoint to input adjoints.  ``backward`` replays those closures in
reverse topological order, accumulating additively at fan-out.  Only nodes
that (transitively) depend on a ``Parameter`` take part in the reverse pass.

Gather/scatter along the vertex axis is executed as sparse matrix products,
which keeps the reduction order fixed and therefore bit-reproducible.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy import sparse

from .errors import InputError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, parents=(), op="", requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """A trainable leaf.  ``trainable`` masks entries that are structural zeros."""

    __slots__ = ("name", "trainable", "uid")

    def __init__(self, data, name="", trainable=None):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.uid = next(_ids)
        self.trainable = None if trainable is None else np.broadcast_to(np.asarray(trainable, bool), self.shape).copy()
        if self.trainable is not None:
            self.data = np.where(self.trainable, self.data, 0.0)
        self.grad = np.zeros_like(self.data)

    @property
    def num_trainable(self) -> int:
        return int(self.data.size if self.trainable is None else self.trainable.sum())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if self.trainable is not None:
            g = np.where(self.trainable, g, 0.0)
        self.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InputError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _node(data, parents, op, backward):
    out = Tensor(data, parents, op)
    if out.requires_grad:
        out._backward = backward
    return out


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), "div", backward)


def scale(x, c: float):
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * c, (x,), "scale", lambda g: (g * c,))


def absolute(x):
    x = as_tensor(x)
    # np.sign(0) == 0: the subgradient at the kink is zero
    return _node(np.abs(x.data), (x,), "abs", lambda g: (g * np.sign(x.data),))


def elu(x):
    """ELU with alpha=1: x for x > 0, exp(x) - 1 otherwise."""
    x = as_tensor(x)
    pos = x.data > 0
    ex = np.exp(np.minimum(x.data, 0.0))
    return _node(np.where(pos, x.data, ex - 1.0), (x,), "elu", lambda g: (g * np.where(pos, 1.0, ex),))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def clip_min(x, lo: float):
    x = as_tensor(x)
    keep = x.data >= lo
    return _node(np.where(keep, x.data, lo), (x,), "clip_min", lambda g: (g * keep,))


# -- reductions and shape ----------------------------------------------------

def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum", backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis, keepdims), 1.0 / count)


def reduce_max(x, axis: int):
    """Max along ``axis``; the adjoint goes to the first argmax slot."""
    x = as_tensor(x)
    axis = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _node(out, (x,), "max", backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise InputError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _node(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise InputError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), "concat", backward)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    """``np.matmul`` semantics (batched, broadcasting leading axes)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InputError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise InputError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), "matmul", backward)


def einsum(spec: str, *operands):
    """Explicit-output einsum.  Every operand index must also occur in the
    output or in another operand, so each adjoint is again a plain einsum."""
    operands = [as_tensor(t) for t in operands]
    if "->" not in spec or "." in spec:
        raise InputError(f"einsum: spec {spec!r} must be explicit and ellipsis-free")
    lhs, out_idx = spec.replace(" ", "").split("->")
    in_idx = lhs.split(",")
    if len(in_idx) != len(operands):
        raise InputError(f"einsum: {len(in_idx)} subscripts for {len(operands)} operands")
    for k, (sub_, t) in enumerate(zip(in_idx, operands)):
        if len(sub_) != t.ndim or len(set(sub_)) != len(sub_):
            raise InputError(f"einsum: operand {k} subscripts {sub_!r} do not fit shape {t.shape}")
        others = out_idx + "".join(s for j, s in enumerate(in_idx) if j != k)
        if any(ch not in others for ch in sub_):
            raise InputError(f"einsum: operand {k} has an index summed only over itself")
    try:
        out = np.einsum(spec, *(t.data for t in operands), optimize=True)
    except ValueError as exc:
        raise InputError(f"einsum {spec!r}: {exc}") from None

    def backward(g):
        grads = []
        for k in range(len(operands)):
            rest = [j for j in range(len(operands)) if j != k]
            sub_spec = ",".join([out_idx] + [in_idx[j] for j in rest]) + "->" + in_idx[k]
            grads.append(np.einsum(sub_spec, g, *(operands[j].data for j in rest), optimize=True))
        return tuple(grads)

    return _node(out, tuple(operands), "einsum", backward)


def _gather_matrix(index: np.ndarray, size: int, weights: np.ndarray | None = None):
    """Sparse ``(index.size, size)`` matrix selecting rows ``index.ravel()``."""
    flat = np.asarray(index, dtype=np.int64).ravel()
    vals = np.ones(flat.size) if weights is None else np.asarray(weights, float).ravel()
    return sparse.csr_matrix((vals, (np.arange(flat.size), flat)), shape=(flat.size, size))


def _apply_rows(mat, x: np.ndarray, axis: int) -> np.ndarray:
    """Apply a sparse matrix along ``axis`` of ``x``."""
    moved = np.moveaxis(x, axis, 0)
    res = mat @ moved.reshape(moved.shape[0], -1)
    res = np.asarray(res).reshape((mat.shape[0],) + moved.shape[1:])
    return np.moveaxis(res, 0, axis)


def gather(x, index, axis: int = -2):
    """Ragged gather: replace ``axis`` of ``x`` by the shape of ``index``.

    With ``x`` of shape ``(B, N_in, C)`` and a ``(N, K)`` table this yields
    ``(B, N, K, C)``.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    n_in = x.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= n_in):
        raise InputError(f"gather: index outside [0, {n_in}) along axis {axis}")
    mat = _gather_matrix(index, n_in)
    flat = _apply_rows(mat, x.data, axis)
    out_shape = x.shape[:axis] + index.shape + x.shape[axis + 1:]

    def backward(g):
        g = g.reshape(x.shape[:axis] + (index.size,) + x.shape[axis + 1:])
        return (_apply_rows(mat.T.tocsr(), g, axis),)

    return _node(flat.reshape(out_shape), (x,), "gather", backward)


def weighted_scatter_add(x, weights, index, size: int):
    """Distribute weighted rows back: ``y[..., index[n, k], :] += w[n, k] * x[..., n, :]``.

    ``x`` is ``(..., N, C)``, ``weights`` and ``index`` are ``(N, K)``; the
    result is ``(..., size, C)``.  This is the transpose of the weighted
    gather-sum ``z[..., n, :] = sum_k w[n, k] * v[..., index[n, k], :]``.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim < 2 or index.ndim != 2 or weights.shape != index.shape or x.shape[-2] != index.shape[0]:
        raise InputError(
            f"weighted_scatter_add: x {x.shape}, weights {weights.shape}, index {index.shape} disagree"
        )
    if index.size and (index.min() < 0 or index.max() >= size):
        raise InputError(f"weighted_scatter_add: index outside [0, {size})")
    n, k = index.shape
    rows = np.repeat(np.arange(n), k)
    mat = sparse.csr_matrix((weights.data.ravel(), (rows, index.ravel())), shape=(n, size))
    out = _apply_rows(mat.T.tocsr(), x.data, x.ndim - 2)

    def backward(g):
        gx = _apply_rows(mat, g, x.ndim - 2)
        # d y[idx[n,k]] / d w[n,k] = x[n]  ->  <g[idx[n,k]], x[n]> summed over batch/channels
        g_sel = np.take(g, index, axis=g.ndim - 2)  # (..., N, K, C)
        prod = g_sel * np.expand_dims(x.data, -2)
        gw = prod.sum(axis=tuple(range(prod.ndim - 3)) + (prod.ndim - 1,))
        return gx, gw

    return _node(out, (x, weights), "scatter_add", backward)


# -- reverse pass ----------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable ``Parameter.grad``."""
    if loss.data.size != 1:
        raise InputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node._accumulate(g)
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


def zero_grad(parameters) -> None:
    for p in parameters:
        p.zero_grad()


def grad_check(function, parameters, epsilon: float = 1e-6) -> float:
    """Max relative error between ``backward`` and central differences.

    ``function()`` must return a scalar Tensor built from ``parameters``.
    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``; only
    trainable entries are probed.
    """
    parameters = list(parameters)
    if not parameters:
        return 0.0
    zero_grad(parameters)
    backward(function())
    worst = 0.0
    for p in parameters:
        analytic = p.grad.copy()
        coords = np.argwhere(p.trainable) if p.trainable is not None else np.ndindex(p.shape)
        for idx in coords:
            idx = tuple(idx)
            orig = p.data[idx]
            p.data[idx] = orig + epsilon
            up = float(function().data)
            p.data[idx] = orig - epsilon
            down = float(function().data)
            p.data[idx] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = analytic[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    zero_grad(parameters)
    return worst

