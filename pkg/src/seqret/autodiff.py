"""Reverse-mode automatic differentiation on a flat tape.

Values wrap float64 numpy arrays and record onto a Tape in construction
order.  The backward pass walks the tape in reverse construction order,
visiting each node at most once, and accumulates vector-Jacobian products.

Two properties of this tape matter for the rest of the package:

* Operations are matrix-granular (one node per matmul / softmax / cumsum,
  not one node per scalar), so sequence-level graphs stay small enough to
  differentiate thousands of times during training and retrieval.
* Adjoints are themselves Values built from the same primitives, so a
  gradient produced by ``Tape.backward`` can be fed back into new graph
  nodes and differentiated again.  The ranking loss needs this: it is a
  function of normalized log-likelihood gradients.

Shapes are validated eagerly; domain violations (log of a non-positive,
division by zero) raise ``DomainError`` instead of propagating NaNs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Value",
    "DomainError",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "relu",
    "square",
    "sqrt",
    "absolute",
    "vsum",
    "dot",
    "matvec",
    "matmul",
    "transpose",
    "softmax",
    "logsumexp",
    "cumsum",
    "flip",
    "reshape",
    "concat",
    "narrow",
    "gather_rows",
    "scatter_rows",
]


class DomainError(ArithmeticError):
    """An input left the mathematical domain of a primitive (e.g. log(x<=0))."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class Value:
    """One tape node: a float64 array plus the recipe to backpropagate it.

    ``parents`` and ``vjps`` are parallel tuples; ``vjps[k]`` maps the
    adjoint of this node to the adjoint contribution of ``parents[k]``.
    Leaves have neither.
    """

    __slots__ = ("data", "tape", "op", "is_leaf", "_idx", "_parents", "_vjps")

    def __init__(self, data, tape, op, parents=(), vjps=(), is_leaf=False):
        self.data = data
        self.tape = tape
        self.op = op
        self.is_leaf = is_leaf
        self._parents = parents
        self._vjps = vjps
        tape._append(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(op={self.op!r}, shape={self.data.shape})"

    # Arithmetic sugar; full rules live in the module-level primitives.
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

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)


class Tape:
    """Flat record of Values in construction order."""

    def __init__(self):
        self._nodes: list[Value] = []

    def __len__(self):
        return len(self._nodes)

    def _append(self, value: Value) -> None:
        value._idx = len(self._nodes)
        self._nodes.append(value)

    def leaf(self, data, name: str = "leaf") -> Value:
        """Register a gradient-tracked input."""
        arr = np.asarray(data, dtype=np.float64)
        return Value(arr, self, name, is_leaf=True)

    def constant(self, data) -> Value:
        """Register data that backward treats as fixed."""
        arr = np.asarray(data, dtype=np.float64)
        return Value(arr, self, "const")

    def backward(self, output: Value, wrt=None, as_values: bool = False):
        """Gradients of a scalar ``output`` with respect to ``wrt`` leaves.

        Walks nodes from ``output`` back to the start of the tape, visiting
        each at most once.  Adjoints are built from tape primitives, so with
        ``as_values=True`` the returned gradients are Values that later
        nodes (and later backward calls) can consume; with the default they
        are detached numpy arrays.

        Leaves in ``wrt`` that ``output`` does not depend on get explicit
        zero gradients.  ``wrt=None`` collects every leaf encountered.
        """
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")

        seed = self.constant(np.ones_like(output.data))
        adjoint: dict[int, Value] = {output._idx: seed}
        leaf_grads: dict[int, Value] = {}
        nodes = self._nodes
        for idx in range(output._idx, -1, -1):
            g = adjoint.pop(idx, None)
            if g is None:
                continue
            node = nodes[idx]
            if node.is_leaf:
                leaf_grads[idx] = g
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if vjp is None:
                    continue
                contrib = vjp(g)
                prev = adjoint.get(parent._idx)
                adjoint[parent._idx] = contrib if prev is None else add(prev, contrib)

        if wrt is None:
            out = {nodes[i]: g for i, g in leaf_grads.items()}
        else:
            out = {}
            for leaf in wrt:
                if not leaf.is_leaf:
                    raise ValueError(f"wrt entry {leaf!r} is not a leaf")
                g = leaf_grads.get(leaf._idx)
                if g is None:
                    g = self.constant(np.zeros_like(leaf.data))
                out[leaf] = g
        if as_values:
            return out
        return {k: v.data for k, v in out.items()}


def _lift(tape: Tape, x) -> Value:
    if isinstance(x, Value):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Value):
            return x.tape
    raise TypeError("at least one operand must be a Value")


def _unbroadcast(g: Value, shape: tuple) -> Value:
    """Reduce an adjoint back to the shape of a broadcast operand."""
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = vsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.data.shape[i] != 1)
    if axes:
        g = vsum(g, axis=axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as err:
        raise ShapeError(f"{op}: cannot broadcast {a.data.shape} with {b.data.shape}") from err


def add(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("add", a, b)
    return Value(
        a.data + b.data,
        tape,
        "add",
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("sub", a, b)
    return Value(
        a.data - b.data,
        tape,
        "sub",
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(neg(g), b.data.shape),
        ),
    )


def mul(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("mul", a, b)
    return Value(
        a.data * b.data,
        tape,
        "mul",
        (a, b),
        (
            lambda g: _unbroadcast(mul(g, b), a.data.shape),
            lambda g: _unbroadcast(mul(g, a), b.data.shape),
        ),
    )


def div(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: denominator contains zero")
    out = Value(a.data / b.data, tape, "div", (a, b), ())
    out._vjps = (
        lambda g: _unbroadcast(div(g, b), a.data.shape),
        lambda g: _unbroadcast(neg(mul(g, div(out, b))), b.data.shape),
    )
    return out


def neg(a) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    return Value(-a.data, tape, "neg", (a,), (lambda g: neg(g),))


def exp(a) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    out = Value(np.exp(a.data), tape, "exp", (a,), ())
    out._vjps = (lambda g: mul(g, out),)
    return out


def log(a) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input contains non-positive entries")
    return Value(np.log(a.data), tape, "log", (a,), (lambda g: div(g, a),))


def tanh(a) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    out = Value(np.tanh(a.data), tape, "tanh", (a,), ())
    out._vjps = (lambda g: mul(g, sub(1.0, square(out))),)
    return out


def relu(a) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    mask = (a.data > 0.0).astype(np.float64)  # slope at the kink is taken as 0
    return Value(a.data * mask, tape, "relu", (a,), (lambda g: mul(g, mask),))


def square(a) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    return Value(np.square(a.data), tape, "square", (a,), (lambda g: mul(g, mul(2.0, a)),))


def sqrt(a) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input contains negative entries")
    out = Value(np.sqrt(a.data), tape, "sqrt", (a,), ())
    out._vjps = (lambda g: div(g, mul(2.0, out)),)
    return out


def absolute(a) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    sign = np.sign(a.data)  # subgradient 0 at exactly 0
    return Value(np.abs(a.data), tape, "abs", (a,), (lambda g: mul(g, sign),))


def vsum(a, axis=None, keepdims: bool = False) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    shape = a.data.shape
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        gd = g
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            kshape = list(out_data.shape)
            for ax in sorted(a_ % len(shape) for a_ in axes):
                kshape.insert(ax, 1)
            gd = reshape(gd, tuple(kshape))
        elif axis is None and not keepdims:
            gd = reshape(gd, (1,) * len(shape)) if shape else gd
        return broadcast_to(gd, shape)

    return Value(np.asarray(out_data), tape, "sum", (a,), (vjp,))


def broadcast_to(a, shape) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as err:
        raise ShapeError(f"broadcast_to: {a.data.shape} -> {shape}") from err
    return Value(out, tape, "broadcast", (a,), (lambda g: _unbroadcast(g, a.data.shape),))


def dot(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot: need equal-length vectors, got {a.data.shape} and {b.data.shape}")
    return Value(
        np.asarray(a.data @ b.data),
        tape,
        "dot",
        (a, b),
        (lambda g: mul(g, b), lambda g: mul(g, a)),
    )


def matvec(m, v) -> Value:
    tape = _tape_of(m, v)
    m, v = _lift(tape, m), _lift(tape, v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"matvec: incompatible {m.data.shape} @ {v.data.shape}")
    return Value(
        m.data @ v.data,
        tape,
        "matvec",
        (m, v),
        (
            lambda g: matmul(reshape(g, (-1, 1)), reshape(v, (1, -1))),
            lambda g: matvec(transpose(m), g),
        ),
    )


def matmul(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible {a.data.shape} @ {b.data.shape}")
    return Value(
        a.data @ b.data,
        tape,
        "matmul",
        (a, b),
        (
            lambda g: matmul(g, transpose(b)),
            lambda g: matmul(transpose(a), g),
        ),
    )


def transpose(a) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need a matrix, got {a.data.shape}")
    return Value(a.data.T.copy(), tape, "transpose", (a,), (lambda g: transpose(g),))


def softmax(a, mask=None) -> Value:
    """Row-wise softmax over the last axis, optionally masked.

    ``mask`` is a boolean array broadcastable to ``a``; False entries get
    probability exactly 0 and receive no gradient.  Each row must keep at
    least one True entry.  The adjoint is the fused form
    ``p * (g - sum(p * g))`` rather than a composition of exp and sum.
    """
    tape = _tape_of(a)
    a = _lift(tape, a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise DomainError("softmax: a row is fully masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=-1, keepdims=True)
    out = Value(p, tape, "softmax", (a,), ())

    def vjp(g):
        inner = vsum(mul(out, g), axis=-1, keepdims=True)
        return mul(out, sub(g, inner))

    out._vjps = (vjp,)
    return out


def logsumexp(a, axis: int = -1) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    m = np.max(a.data, axis=axis, keepdims=True)
    out_data = np.squeeze(m, axis=axis) + np.log(
        np.sum(np.exp(a.data - m), axis=axis)
    )
    out = Value(np.asarray(out_data), tape, "logsumexp", (a,), ())

    def vjp(g):
        # d lse / d a = softmax(a); expressed through the recorded output.
        ax = axis % a.data.ndim
        kshape = list(out.data.shape)
        kshape.insert(ax, 1)
        w = exp(sub(a, reshape(out, tuple(kshape))))
        return mul(reshape(g, tuple(kshape)), w)

    out._vjps = (vjp,)
    return out


def cumsum(a, axis: int = 0) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    return Value(
        np.cumsum(a.data, axis=axis),
        tape,
        "cumsum",
        (a,),
        (lambda g: flip(cumsum(flip(g, axis=axis), axis=axis), axis=axis),),
    )


def flip(a, axis: int = 0) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    return Value(np.flip(a.data, axis=axis).copy(), tape, "flip", (a,), (lambda g: flip(g, axis=axis),))


def reshape(a, shape) -> Value:
    tape = _tape_of(a)
    a = _lift(tape, a)
    old = a.data.shape
    try:
        out = a.data.reshape(shape).copy()
    except ValueError as err:
        raise ShapeError(f"reshape: {old} -> {shape}") from err
    return Value(out, tape, "reshape", (a,), (lambda g: reshape(g, old),))


def concat(parts) -> Value:
    """Concatenate 1-d Values."""
    parts = list(parts)
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat: need vectors, got {p.data.shape}")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def make_vjp(k):
        return lambda g: narrow(g, int(offsets[k]), sizes[k])

    return Value(
        np.concatenate([p.data for p in parts]),
        tape,
        "concat",
        tuple(parts),
        tuple(make_vjp(k) for k in range(len(parts))),
    )


def narrow(a, start: int, length: int) -> Value:
    """Contiguous 1-d slice ``a[start:start+length]``."""
    tape = _tape_of(a)
    a = _lift(tape, a)
    if a.data.ndim != 1 or start < 0 or start + length > a.data.shape[0]:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of {a.data.shape}")
    n = a.data.shape[0]

    def vjp(g):
        pieces = []
        if start > 0:
            pieces.append(a.tape.constant(np.zeros(start)))
        pieces.append(g)
        if start + length < n:
            pieces.append(a.tape.constant(np.zeros(n - start - length)))
        return concat(pieces) if len(pieces) > 1 else pieces[0]

    return Value(a.data[start : start + length].copy(), tape, "narrow", (a,), (vjp,))


def gather_rows(m, idx) -> Value:
    """Select rows ``m[idx]``; the adjoint scatter-adds back."""
    tape = _tape_of(m)
    m = _lift(tape, m)
    idx = np.asarray(idx, dtype=np.intp)
    if m.data.ndim != 2:
        raise ShapeError(f"gather_rows: need a matrix, got {m.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= m.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {m.data.shape[0]} rows")
    nrows = m.data.shape[0]
    return Value(
        m.data[idx].copy(),
        tape,
        "gather_rows",
        (m,),
        (lambda g: scatter_rows(g, idx, nrows),),
    )


def scatter_rows(g, idx, nrows: int) -> Value:
    """Rows of ``g`` added into a zero matrix at ``idx`` (duplicates accumulate)."""
    tape = _tape_of(g)
    g = _lift(tape, g)
    idx = np.asarray(idx, dtype=np.intp)
    if g.data.ndim != 2 or idx.shape[0] != g.data.shape[0]:
        raise ShapeError(f"scatter_rows: {g.data.shape} rows vs {idx.shape} indices")
    out = np.zeros((nrows, g.data.shape[1]))
    np.add.at(out, idx, g.data)
    return Value(out, tape, "scatter_rows", (g,), (lambda gg: gather_rows(gg, idx),))
