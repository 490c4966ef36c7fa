"""Reverse-mode automatic differentiation with higher-order support.

Each :class:`Var` is a node in an implicit append-only computation graph
(the tape): nodes hold their cached output tensor, their parent nodes and
a vjp closure. Node ids increase monotonically with creation order, so the
graph is acyclic by construction and a descending-id sweep is a valid
reverse-topological traversal.

The backward pass is itself expressed in these same ops, so calling
:func:`grad` with ``create_graph=True`` records the backward computation
onto the tape and a second :func:`grad` through the result yields exact
second derivatives. No symbolic differentiation is involved.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import DomainError, LineageError, ShapeError
from .tensor import Tensor

_ids = itertools.count()


class Var:
    """A tensor bound to a node of the differentiable graph."""

    __slots__ = ("value", "parents", "_vjp", "op", "_id")

    def __init__(self, value, parents=None, vjp=None, op="leaf"):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.parents = parents
        self._vjp = vjp
        self.op = op
        self._id = next(_ids)

    @classmethod
    def leaf(cls, value) -> "Var":
        return cls(value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def array(self) -> np.ndarray:
        return self.value.array

    def item(self) -> float:
        return self.value.item()

    def detach(self) -> "Var":
        return Var.leaf(self.value)

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _as_var(other))

    def __radd__(self, other):
        return add(_as_var(other), self)

    def __sub__(self, other):
        return sub(self, _as_var(other))

    def __rsub__(self, other):
        return sub(_as_var(other), self)

    def __mul__(self, other):
        return mul(self, _as_var(other))

    def __rmul__(self, other):
        return mul(_as_var(other), self)

    def __truediv__(self, other):
        return div(self, _as_var(other))

    def __matmul__(self, other):
        return matmul(self, _as_var(other))

    def __neg__(self):
        return neg(self)


def _as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var.leaf(x)


def _node(arr, parents, vjp, op) -> Var:
    return Var(Tensor._wrap(arr), parents=tuple(parents), vjp=vjp, op=op)


def const(arr) -> Var:
    """A detached constant leaf."""
    return Var.leaf(Tensor._wrap(arr))


_const = const


# -- elementwise binary ops ------------------------------------------------

def _binary_arrays(a: Var, b: Var):
    """Shape-check a binary op: equal shapes, a scalar against anything,
    or a length-D vector against an N x D matrix along rows."""
    xa, xb = a.array, b.array
    if xa.shape == xb.shape:
        return xa, xb
    if xa.shape == () or xb.shape == ():
        return xa, xb
    if xa.ndim == 2 and xb.ndim == 1 and xa.shape[1] == xb.shape[0]:
        return xa, xb[None, :]
    if xa.ndim == 1 and xb.ndim == 2 and xb.shape[1] == xa.shape[0]:
        return xa[None, :], xb
    raise ShapeError(f"elementwise shapes incompatible: {xa.shape} vs {xb.shape}")


def _reduce_to(adj: Var, shape) -> Var:
    """Sum an adjoint over the axes a forward broadcast expanded."""
    if adj.shape == shape:
        return adj
    if shape == ():
        return vsum(adj)
    # adjoint is N x D, target is the broadcast length-D vector
    return vsum(adj, axis=0)


def add(a: Var, b: Var) -> Var:
    xa, xb = _binary_arrays(a, b)

    def vjp(adj):
        return (lambda: _reduce_to(adj, a.shape), lambda: _reduce_to(adj, b.shape))

    return _node(xa + xb, (a, b), vjp, "add")


def sub(a: Var, b: Var) -> Var:
    xa, xb = _binary_arrays(a, b)

    def vjp(adj):
        return (
            lambda: _reduce_to(adj, a.shape),
            lambda: _reduce_to(neg(adj), b.shape),
        )

    return _node(xa - xb, (a, b), vjp, "sub")


def mul(a: Var, b: Var) -> Var:
    xa, xb = _binary_arrays(a, b)

    def vjp(adj):
        return (
            lambda: _reduce_to(mul(adj, b), a.shape),
            lambda: _reduce_to(mul(adj, a), b.shape),
        )

    return _node(xa * xb, (a, b), vjp, "mul")


def div(a: Var, b: Var) -> Var:
    xa, xb = _binary_arrays(a, b)
    if np.any(xb == 0.0):
        raise DomainError("division by exact zero")
    out = _node(xa / xb, (a, b), None, "div")

    def vjp(adj):
        return (
            lambda: _reduce_to(div(adj, b), a.shape),
            lambda: _reduce_to(neg(div(mul(adj, out), b)), b.shape),
        )

    out._vjp = vjp
    return out


# -- elementwise unary ops -------------------------------------------------

def neg(a: Var) -> Var:
    def vjp(adj):
        return (lambda: neg(adj),)

    return _node(-a.array, (a,), vjp, "neg")


def exp(a: Var) -> Var:
    out = _node(np.exp(a.array), (a,), None, "exp")

    def vjp(adj):
        return (lambda: mul(adj, out),)

    out._vjp = vjp
    return out


def log(a: Var) -> Var:
    if np.any(a.array <= 0.0):
        raise DomainError("log of nonpositive value")

    def vjp(adj):
        return (lambda: div(adj, a),)

    return _node(np.log(a.array), (a,), vjp, "log")


def sqrt(a: Var) -> Var:
    if np.any(a.array < 0.0):
        raise DomainError("sqrt of negative value")
    out = _node(np.sqrt(a.array), (a,), None, "sqrt")

    def vjp(adj):
        return (lambda: div(mul(adj, _const(0.5)), out),)

    out._vjp = vjp
    return out


def square(a: Var) -> Var:
    def vjp(adj):
        return (lambda: mul(adj, mul(a, _const(2.0))),)

    return _node(a.array * a.array, (a,), vjp, "square")


def relu(a: Var) -> Var:
    # the subgradient at 0 is taken as 0; the mask is a constant, which is
    # exact for higher-order derivatives almost everywhere
    mask = _const((a.array > 0.0).astype(np.float64))

    def vjp(adj):
        return (lambda: mul(adj, mask),)

    return _node(np.maximum(a.array, 0.0), (a,), vjp, "relu")


# -- linear algebra and structure ops ---------------------------------------

def matmul(a: Var, b: Var) -> Var:
    if a.array.ndim != 2 or b.array.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")

    def vjp(adj):
        return (
            lambda: matmul(adj, transpose(b)),
            lambda: matmul(transpose(a), adj),
        )

    return _node(a.array @ b.array, (a, b), vjp, "matmul")


def transpose(a: Var) -> Var:
    if a.array.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")

    def vjp(adj):
        return (lambda: transpose(adj),)

    return _node(a.array.T, (a,), vjp, "transpose")


def reshape(a: Var, shape) -> Var:
    shape = tuple(shape)
    old = a.shape

    def vjp(adj):
        return (lambda: reshape(adj, old),)

    return _node(a.array.reshape(shape), (a,), vjp, "reshape")


def vsum(a: Var, axis: int | None = None) -> Var:
    """Sum over all elements (scalar output) or along one axis of a matrix."""
    if axis is None:
        n, d = None, None
        out_arr = np.sum(a.array)
    else:
        if a.array.ndim != 2 or axis not in (0, 1):
            raise ShapeError(f"axis sum supports rank-2 tensors, got {a.shape} axis={axis}")
        n, d = a.shape
        out_arr = np.sum(a.array, axis=axis)
    ones = _const(np.ones(a.shape))

    def vjp(adj):
        if axis is None:
            return (lambda: mul(ones, adj),)
        if axis == 0:
            return (lambda: mul(ones, adj),)
        return (lambda: scale_rows(ones, adj),)

    return _node(out_arr, (a,), vjp, "sum")


def vmean(a: Var, axis: int | None = None) -> Var:
    count = a.value.size if axis is None else a.shape[axis]
    return mul(vsum(a, axis=axis), _const(1.0 / count))


def scale_rows(m: Var, v: Var) -> Var:
    """Multiply each row of an N x D matrix by the matching entry of a
    length-N vector."""
    if m.array.ndim != 2 or v.array.ndim != 1 or m.shape[0] != v.shape[0]:
        raise ShapeError(f"scale_rows shapes incompatible: {m.shape} vs {v.shape}")

    def vjp(adj):
        return (
            lambda: scale_rows(adj, v),
            lambda: vsum(mul(adj, m), axis=1),
        )

    return _node(m.array * v.array[:, None], (m, v), vjp, "scale_rows")


def stack_views(views) -> Var:
    """Stack M matrices of shape N x D into an N x M x D tensor."""
    views = tuple(views)
    if not views:
        raise ShapeError("stack_views of an empty list")
    shape = views[0].shape
    for v in views:
        if v.shape != shape or v.array.ndim != 2:
            raise ShapeError("stack_views needs equal-shape rank-2 inputs")

    def vjp(adj):
        return tuple((lambda j=j: take_view(adj, j)) for j in range(len(views)))

    return _node(np.stack([v.array for v in views], axis=1), views, vjp, "stack_views")


def take_view(a: Var, j: int) -> Var:
    """Select view j from an N x M x D tensor, giving N x D."""
    if a.array.ndim != 3 or not (0 <= j < a.shape[1]):
        raise ShapeError(f"take_view({j}) on shape {a.shape}")
    m_views = a.shape[1]

    def vjp(adj):
        return (lambda: embed_view(adj, j, m_views),)

    return _node(a.array[:, j, :], (a,), vjp, "take_view")


def embed_view(a: Var, j: int, m_views: int) -> Var:
    """Place an N x D matrix at view slot j of an otherwise-zero N x M x D
    tensor (the adjoint of :func:`take_view`)."""
    if a.array.ndim != 2 or not (0 <= j < m_views):
        raise ShapeError(f"embed_view({j}, {m_views}) on shape {a.shape}")
    out_arr = np.zeros((a.shape[0], m_views, a.shape[1]))
    out_arr[:, j, :] = a.array

    def vjp(adj):
        return (lambda: take_view(adj, j),)

    return _node(out_arr, (a,), vjp, "embed_view")


# -- differentiation ---------------------------------------------------------

def _ancestors(root: Var) -> dict:
    found = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.parents:
            for p in node.parents:
                if id(p) not in found:
                    found[id(p)] = p
                    stack.append(p)
    return found


def grad(loss: Var, wrt, create_graph: bool = False) -> list:
    """Gradients of a scalar loss with respect to each var in ``wrt``.

    With ``create_graph=True`` the returned gradients are live graph nodes,
    so differentiating through them gives exact second derivatives; with
    ``create_graph=False`` they are detached leaves with bit-identical
    values (the same backward computation runs either way).
    """
    wrt = list(wrt)
    if loss.value.shape != ():
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    reachable = _ancestors(loss)
    wrt_ids = {id(w) for w in wrt}
    for w in wrt:
        if id(w) not in reachable:
            raise LineageError(f"target {w!r} is not an ancestor of the loss")

    # nodes lying on some wrt -> loss path: wrt itself or any node with a
    # required parent (increasing-id order is topological)
    ordered = sorted(reachable.values(), key=lambda n: n._id)
    required = set()
    for node in ordered:
        if id(node) in wrt_ids or (
            node.parents and any(id(p) in required for p in node.parents)
        ):
            required.add(id(node))

    adjoints = {id(loss): _const(np.ones(()))}
    for node in reversed(ordered):
        adj = adjoints.get(id(node))
        if adj is None or not node.parents:
            continue
        thunks = node._vjp(adj)
        for parent, thunk in zip(node.parents, thunks):
            if id(parent) not in required:
                continue
            contrib = thunk()
            prev = adjoints.get(id(parent))
            adjoints[id(parent)] = contrib if prev is None else add(prev, contrib)

    results = [adjoints[id(w)] for w in wrt]
    if not create_graph:
        results = [g.detach() for g in results]
    return results


def checkpoint(params) -> list:
    """Detached leaf copies of the given vars: same values, severed from
    the graph. Idempotent."""
    return [Var.leaf(p.value) for p in params]
