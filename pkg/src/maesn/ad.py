"""Small reverse-mode autodiff over float64 numpy arrays.

Every gradient rule is written with the same differentiable ops it
differentiates, so a gradient computed with ``create_graph=True`` is an
ordinary node and can be differentiated again. That is all the meta-gradient
needs: the inner policy-gradient step is a graph, and the outer objective
backpropagates through it.

A numeric forward-mode sweep (:func:`jvp`) over a recorded graph is also
provided; combined with :func:`vjp` it gives exact Gauss-Newton / Fisher
vector products without building third-order graphs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "constant",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "relu",
    "tanh",
    "exp",
    "log",
    "square",
    "clip",
    "sum",
    "mean",
    "reshape",
    "broadcast_to",
    "sum_to",
    "swapaxes",
    "concat",
    "take_last",
    "pad_last",
    "stop_gradient",
    "grad",
    "vjp",
    "jvp",
    "check_finite",
]


class ShapeError(ValueError):
    pass


_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Ops inside the block return constants and record nothing."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = grad_enabled()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    """A node: value, parents, and the rules to push (co)tangents through it."""

    __slots__ = ("value", "parents", "backward_fn", "jvp_fn", "op", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, value, parents=(), backward_fn=None, jvp_fn=None, op="leaf",
                 requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.jvp_fn = jvp_fn
        self.op = op
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def tensor(value, requires_grad=True, name=None) -> Tensor:
    """A leaf parameter."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(value, parents, backward_fn, jvp_fn, op) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(value, parents, backward_fn, jvp_fn, op, requires_grad=True)
    return Tensor(value, op=op)


def _broadcast_shape(op, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _tz(t, shape):
    """Tangent or zeros."""
    return np.zeros(shape) if t is None else t


# ----------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    out = a.value + b.value

    def backward(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    def fwd(ts):
        ta, tb = ts
        if ta is None:
            return np.broadcast_to(tb, out.shape).copy()
        if tb is None:
            return np.broadcast_to(ta, out.shape).copy()
        return ta + tb

    return _node(out, (a, b), backward, fwd, "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    out = a.value - b.value

    def backward(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    def fwd(ts):
        ta, tb = ts
        return np.broadcast_to(_tz(ta, a.shape), out.shape) - _tz(tb, b.shape)

    return _node(out, (a, b), backward, fwd, "sub")


def neg(a) -> Tensor:
    a = constant(a)

    def backward(g, needs):
        return (neg(g),)

    return _node(-a.value, (a,), backward, lambda ts: -ts[0], "neg")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    out = a.value * b.value

    def backward(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    def fwd(ts):
        ta, tb = ts
        r = np.zeros(out.shape)
        if ta is not None:
            r = r + ta * b.value
        if tb is not None:
            r = r + a.value * tb
        return r

    return _node(out, (a, b), backward, fwd, "mul")


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("div", a, b)
    out = a.value / b.value
    holder = []

    def backward(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = sum_to(neg(div(mul(g, holder[0]), b)), b.shape)
        return ga, gb

    def fwd(ts):
        ta, tb = ts
        r = np.zeros(out.shape)
        if ta is not None:
            r = r + ta / b.value
        if tb is not None:
            r = r - tb * out / b.value
        return r

    node = _node(out, (a, b), backward, fwd, "div")
    holder.append(node)
    return node


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = a.value @ b.value

    def backward(g, needs):
        ga = sum_to(matmul(g, swapaxes(b)), a.shape) if needs[0] else None
        gb = sum_to(matmul(swapaxes(a), g), b.shape) if needs[1] else None
        return ga, gb

    def fwd(ts):
        ta, tb = ts
        r = None
        if ta is not None:
            r = ta @ b.value
        if tb is not None:
            rb = a.value @ tb
            r = rb if r is None else r + rb
        return np.broadcast_to(r, out.shape).copy() if r.shape != out.shape else r

    return _node(out, (a, b), backward, fwd, "matmul")


def swapaxes(a) -> Tensor:
    """Swap the last two axes."""
    a = constant(a)

    def backward(g, needs):
        return (swapaxes(g),)

    return _node(np.swapaxes(a.value, -1, -2), (a,), backward,
                 lambda ts: np.swapaxes(ts[0], -1, -2), "swapaxes")


# ----------------------------------------------------------------------------
# elementwise unary


def relu(a) -> Tensor:
    a = constant(a)
    # derivative at exactly 0 is 0
    mask = (a.value > 0).astype(np.float64)
    m = Tensor(mask)

    def backward(g, needs):
        return (mul(g, m),)

    return _node(a.value * mask, (a,), backward, lambda ts: ts[0] * mask, "relu")


def tanh(a) -> Tensor:
    a = constant(a)
    out = np.tanh(a.value)
    holder = []

    def backward(g, needs):
        return (mul(g, sub(1.0, square(holder[0]))),)

    node = _node(out, (a,), backward, lambda ts: ts[0] * (1.0 - out * out), "tanh")
    holder.append(node)
    return node


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.value)
    holder = []

    def backward(g, needs):
        return (mul(g, holder[0]),)

    node = _node(out, (a,), backward, lambda ts: ts[0] * out, "exp")
    holder.append(node)
    return node


def log(a) -> Tensor:
    a = constant(a)

    def backward(g, needs):
        return (div(g, a),)

    return _node(np.log(a.value), (a,), backward, lambda ts: ts[0] / a.value, "log")


def square(a) -> Tensor:
    a = constant(a)

    def backward(g, needs):
        return (mul(g, mul(2.0, a)),)

    return _node(a.value * a.value, (a,), backward, lambda ts: 2.0 * a.value * ts[0], "square")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; derivative 1 strictly inside, 0 at or beyond the bounds."""
    a = constant(a)
    inside = ((a.value > lo) & (a.value < hi)).astype(np.float64)
    m = Tensor(inside)

    def backward(g, needs):
        return (mul(g, m),)

    return _node(np.clip(a.value, lo, hi), (a,), backward, lambda ts: ts[0] * inside, "clip")


# ----------------------------------------------------------------------------
# reductions and shape plumbing


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = constant(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)
    kshape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def backward(g, needs):
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return _node(out, (a,), backward,
                 lambda ts: ts[0].sum(axis=axes, keepdims=keepdims), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = constant(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    src = a.shape

    def backward(g, needs):
        return (reshape(g, src),)

    return _node(out, (a,), backward, lambda ts: ts[0].reshape(out.shape), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape

    def backward(g, needs):
        return (sum_to(g, src),)

    return _node(out, (a,), backward, lambda ts: np.broadcast_to(ts[0], shape), "broadcast_to")


def _sum_to_array(x: np.ndarray, shape) -> np.ndarray:
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, d in enumerate(shape) if d == 1 and x.shape[i + lead] != 1)
    r = x.sum(axis=axes, keepdims=True)
    return r.reshape(shape)


def sum_to(a, shape) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    a = constant(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    out = _sum_to_array(a.value, shape)
    src = a.shape

    def backward(g, needs):
        return (broadcast_to(g, src),)

    return _node(out, (a,), backward, lambda ts: _sum_to_array(ts[0], shape), "sum_to")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    if axis not in (-1,):
        raise ValueError("concat only supports the last axis")
    parts = [constant(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: shapes {parts[0].shape} and {p.shape} differ before the last axis")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([p.value for p in parts], axis=-1)

    def backward(g, needs):
        return tuple(take_last(g, int(bounds[i]), int(bounds[i + 1])) if needs[i] else None
                     for i in range(len(parts)))

    def fwd(ts):
        return np.concatenate([_tz(t, p.shape) for t, p in zip(ts, parts)], axis=-1)

    return _node(out, parts, backward, fwd, "concat")


def take_last(a, start: int, stop: int) -> Tensor:
    """Slice ``[..., start:stop]``."""
    a = constant(a)
    width = a.shape[-1]

    def backward(g, needs):
        return (pad_last(g, start, width - stop),)

    return _node(a.value[..., start:stop], (a,), backward,
                 lambda ts: ts[0][..., start:stop], "take_last")


def pad_last(a, before: int, after: int) -> Tensor:
    """Zero-pad the last axis (adjoint of take_last)."""
    a = constant(a)
    widths = [(0, 0)] * (a.ndim - 1) + [(before, after)]
    stop = before + a.shape[-1]

    def backward(g, needs):
        return (take_last(g, before, stop),)

    return _node(np.pad(a.value, widths), (a,), backward,
                 lambda ts: np.pad(ts[0], widths), "pad_last")


def stop_gradient(a) -> Tensor:
    return Tensor(constant(a).value)


# ----------------------------------------------------------------------------
# differentiation


def _topo(roots: Iterable[Tensor]) -> list[Tensor]:
    """Nodes reachable from ``roots`` through grad-requiring parents, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen or not root.requires_grad:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def vjp(outputs: Sequence[Tensor], cotangents: Sequence, wrt: Sequence[Tensor],
        create_graph: bool = False) -> list[Tensor]:
    """Return d(sum_k <outputs[k], cotangents[k]>)/d(wrt) as Tensors.

    ``wrt`` may be any nodes, not only leaves. Nodes the outputs do not depend
    on get a zero gradient rather than an error.
    """
    outputs = list(outputs)
    wrt = list(wrt)
    wrt_ids = {id(w) for w in wrt}
    order = _topo(outputs)

    relevant: dict[int, bool] = {}
    for node in order:
        relevant[id(node)] = id(node) in wrt_ids or any(
            relevant.get(id(p), False) for p in node.parents)

    with _grad_mode(create_graph):
        grads: dict[int, Tensor] = {}
        for out, ct in zip(outputs, cotangents):
            if not out.requires_grad:
                continue
            ct = constant(ct)
            if ct.shape != out.shape:
                raise ShapeError(f"vjp: cotangent {ct.shape} does not match output {out.shape}")
            grads[id(out)] = add(grads[id(out)], ct) if id(out) in grads else ct

        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or not relevant[id(node)] or not node.parents:
                continue
            needs = tuple(p.requires_grad and relevant.get(id(p), False) for p in node.parents)
            if not any(needs):
                continue
            pgrads = node.backward_fn(g, needs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if not need or pg is None:
                    continue
                k = id(p)
                grads[k] = add(grads[k], pg) if k in grads else pg

        result = []
        for w in wrt:
            g = grads.get(id(w))
            result.append(Tensor(np.zeros(w.shape)) if g is None else g)
    return result


def grad(y: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradient of scalar ``y`` with respect to each node in ``wrt``.

    With ``create_graph=True`` the returned gradients are graph nodes that can
    be differentiated again.
    """
    if y.shape != ():
        raise ShapeError(f"grad: output must be a scalar, got shape {y.shape}")
    return vjp([y], [np.ones(())], wrt, create_graph=create_graph)


def jvp(outputs: Sequence[Tensor], inputs: Sequence[Tensor], tangents: Sequence) -> list[np.ndarray]:
    """Forward-mode directional derivative of ``outputs`` along ``tangents``.

    Sweeps the already-recorded graph numerically; nothing new is recorded.
    """
    inputs = list(inputs)
    tan: dict[int, np.ndarray] = {}
    for x, t in zip(inputs, tangents):
        t = np.asarray(t, dtype=np.float64)
        if t.shape != x.shape:
            raise ShapeError(f"jvp: tangent {t.shape} does not match input {x.shape}")
        tan[id(x)] = t
    input_ids = set(tan)
    for node in _topo(outputs):
        k = id(node)
        if k in input_ids or not node.parents:
            continue
        ts = [tan.get(id(p)) for p in node.parents]
        if all(t is None for t in ts):
            continue
        tan[k] = node.jvp_fn(ts)
    return [np.array(tan[id(o)]) if id(o) in tan else np.zeros(o.shape) for o in outputs]


def check_finite(named: dict[str, Tensor | np.ndarray], context: str = "") -> None:
    """Raise FloatingPointError listing every entry holding NaN or Inf."""
    bad = []
    for name, v in named.items():
        arr = v.value if isinstance(v, Tensor) else np.asarray(v)
        if not np.all(np.isfinite(arr)):
            bad.append(f"{name} (nan={int(np.isnan(arr).sum())}, inf={int(np.isinf(arr).sum())})")
    if bad:
        prefix = f"{context}: " if context else ""
        raise FloatingPointError(prefix + "non-finite values in " + ", ".join(bad))
