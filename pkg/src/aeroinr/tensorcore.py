"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every vector-Jacobian product is itself written with taped tensor ops, so a
gradient computed with ``create_graph=True`` can be differentiated again.
This is what makes gradients through an unrolled inner optimization loop
exact (second order) rather than approximated.

Usage::

    value, grads = value_and_grad(lambda w: (w * w).sum_sq(), [np.ones(3)])
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "AdamState",
    "AutodiffError",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "UnsupportedPrimitiveError",
    "adam_update",
    "concat",
    "const",
    "grad_through_inner_loop",
    "value_and_grad",
]


class AutodiffError(Exception):
    """Base class for tensorcore failures."""


class UnsupportedPrimitiveError(AutodiffError):
    def __init__(self, primitive: str):
        self.primitive = primitive
        super().__init__(f"unsupported primitive {primitive!r} applied to a Tensor")


class NonFiniteError(AutodiffError):
    def __init__(self, node_id: int | None, op: str):
        self.node_id = node_id
        self.op = op
        super().__init__(f"non-finite value produced by {op!r} at node {node_id}")


class ShapeError(AutodiffError, ValueError):
    pass


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------

def _sum_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def _pad(x: np.ndarray, axis: int, start: int, total: int) -> np.ndarray:
    shape = list(x.shape)
    shape[axis] = total
    out = np.zeros(shape)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + x.shape[axis])
    out[tuple(idx)] = x
    return out


def _slice(x: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return np.ascontiguousarray(x[tuple(idx)])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "neg": lambda a: -a,
    "scale": lambda a, c: a * c,
    "matmul": lambda a, b: np.matmul(a, b),
    "transpose": lambda a: np.swapaxes(a, -1, -2),
    "reshape": lambda a, shape: a.reshape(shape),
    "sum": lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
    "mean": lambda a: np.asarray(a.mean()),
    "sum_sq": lambda a: np.asarray(np.sum(a * a)),
    "broadcast_to": lambda a, shape: np.ascontiguousarray(np.broadcast_to(a, shape)),
    "sum_to": lambda a, shape: _sum_to(a, shape),
    "relu": lambda a: np.maximum(a, 0.0),
    "sin": np.sin,
    "cos": np.cos,
    "sigmoid": _sigmoid,
    "silu": lambda a: a * _sigmoid(a),
    "concat": lambda *xs, axis: np.concatenate(xs, axis=axis),
    "slice": _slice,
    "pad": _pad,
}


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    op: str
    inputs: tuple["Tensor", ...]
    attrs: dict[str, Any]
    out: "Tensor"


_TAPES: list["Tape"] = []


def _active() -> "Tape | None":
    if _TAPES and not _TAPES[-1]._paused:
        return _TAPES[-1]
    return None


class Tape:
    """Ordered record of primitive operations.

    Node ids are positions in :attr:`nodes`; because the record is append
    only, reverse id order is a reverse topological order.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite
        self._paused = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    @contextlib.contextmanager
    def paused(self):
        prev, self._paused = self._paused, True
        try:
            yield
        finally:
            self._paused = prev

    def watch(self, value) -> "Tensor":
        """Register ``value`` as a differentiable leaf."""
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        t.node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), {}, t))
        return t

    def _record(self, op, inputs, attrs, out: "Tensor") -> None:
        out.node = len(self.nodes)
        self.nodes.append(_Node(op, inputs, attrs, out))

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the recorded leaves and constants.

        Raises AutodiffError when a recomputed value differs bitwise from
        the recorded one.
        """
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                values.append(node.out.data)
                continue
            args = [values[t.node] if t.node is not None and t.node < i and self.nodes[t.node].out is t
                    else t.data for t in node.inputs]
            v = _FORWARD[node.op](*args, **node.attrs)
            if v.shape != node.out.data.shape or not np.array_equal(v, node.out.data):
                raise AutodiffError(f"replay mismatch at node {i} ({node.op})")
            values.append(v)
        return values

    def grad(self, output: "Tensor", inputs: Sequence["Tensor"],
             create_graph: bool = False) -> list["Tensor"]:
        """Gradients of scalar ``output`` with respect to ``inputs``.

        With ``create_graph`` the backward pass is recorded on this tape, so
        the returned gradients are themselves differentiable.
        """
        if output.data.size != 1:
            raise ShapeError("grad requires a scalar output")
        if output.node is None or self.nodes[output.node].out is not output:
            raise AutodiffError("output was not recorded on this tape")
        wanted = {t.node: k for k, t in enumerate(inputs) if t.node is not None}
        results: list[Tensor | None] = [None] * len(inputs)
        if not wanted:
            return [Tensor(np.zeros_like(t.data)) for t in inputs]
        lowest = min(wanted)
        grads: dict[int, Tensor] = {output.node: Tensor(np.ones_like(output.data))}
        ctx = contextlib.nullcontext() if create_graph else self.paused()
        with ctx:
            for nid in range(output.node, lowest - 1, -1):
                g = grads.pop(nid, None)
                if g is None:
                    continue
                if nid in wanted:
                    results[wanted[nid]] = g
                node = self.nodes[nid]
                if not node.inputs:
                    continue
                parts = _VJP[node.op](g, node, **node.attrs)
                for parent, pg in zip(node.inputs, parts):
                    if pg is None or not parent.requires_grad or parent.node is None:
                        continue
                    prev = grads.get(parent.node)
                    grads[parent.node] = pg if prev is None else prev + pg
        return [r if r is not None else Tensor(np.zeros_like(t.data))
                for r, t in zip(results, inputs)]


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

def _apply(op: str, inputs: tuple["Tensor", ...], **attrs) -> "Tensor":
    data = _FORWARD[op](*(t.data for t in inputs), **attrs)
    tape = _active()
    out = Tensor(data, requires_grad=tape is not None and any(t.requires_grad for t in inputs))
    if tape is not None:
        tape._record(op, inputs, attrs, out)
        if tape.check_finite and not np.isfinite(data).all():
            raise NonFiniteError(out.node, op)
    return out


def _resolve_shape(size: int, shape) -> tuple[int, ...]:
    shape = [int(s) for s in shape]
    if shape.count(-1) == 1:
        known = int(np.prod([s for s in shape if s != -1]))
        shape[shape.index(-1)] = size // known if known else 0
    if int(np.prod(shape)) != size:
        raise ShapeError(f"cannot reshape {size} elements into {tuple(shape)}")
    return tuple(shape)


def const(x) -> "Tensor":
    """Wrap an array (or scalar) as a non-differentiable tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    """Row-major float64 array carrying a tape node id."""

    __slots__ = ("data", "requires_grad", "node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: int | None = None

    def __array_ufunc__(self, ufunc, method, *args, **kwargs):
        raise UnsupportedPrimitiveError(getattr(ufunc, "__name__", str(ufunc)))

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitiveError(getattr(func, "__name__", str(func)))

    def __pow__(self, other):
        raise UnsupportedPrimitiveError("pow")

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(1.0 / other)
        raise UnsupportedPrimitiveError("div")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"

    def item(self) -> float:
        return float(self.data)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = const(np.full((), float(other)))
        return _apply("add", (self, const(other)))

    def __radd__(self, other):
        return const(other) + self

    def __sub__(self, other):
        return _apply("sub", (self, const(other)))

    def __rsub__(self, other):
        return _apply("sub", (const(other), self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(other)
        return _apply("mul", (self, const(other)))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(other)
        return _apply("mul", (const(other), self))

    def __neg__(self):
        return _apply("neg", (self,))

    def __matmul__(self, other):
        other = const(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-D")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul shape mismatch {self.shape} @ {other.shape}")
        return _apply("matmul", (self, other))

    def __rmatmul__(self, other):
        return const(other) @ self

    def scale(self, c: float):
        return _apply("scale", (self,), c=float(c))

    # structural -----------------------------------------------------------
    @property
    def T(self):
        return _apply("transpose", (self,))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        shape = _resolve_shape(self.data.size, shape)
        if shape == self.shape:
            return self
        return _apply("reshape", (self,), shape=shape)

    def sum(self, axis=None, keepdims: bool = False):
        if isinstance(axis, list):
            axis = tuple(axis)
        return _apply("sum", (self,), axis=axis, keepdims=keepdims)

    def mean(self):
        return _apply("mean", (self,))

    def sum_sq(self):
        return _apply("sum_sq", (self,))

    def broadcast_to(self, shape):
        shape = tuple(shape)
        if shape == self.shape:
            return self
        return _apply("broadcast_to", (self,), shape=shape)

    def sum_to(self, shape):
        shape = tuple(shape)
        if shape == self.shape:
            return self
        return _apply("sum_to", (self,), shape=shape)

    def slice(self, axis: int, start: int, stop: int):
        axis = axis % self.ndim
        return _apply("slice", (self,), axis=axis, start=int(start), stop=int(stop))

    def pad(self, axis: int, start: int, total: int):
        axis = axis % self.ndim
        return _apply("pad", (self,), axis=axis, start=int(start), total=int(total))

    # nonlinearities ---------------------------------------------------------
    def relu(self):
        return _apply("relu", (self,))

    def sin(self):
        return _apply("sin", (self,))

    def cos(self):
        return _apply("cos", (self,))

    def sigmoid(self):
        return _apply("sigmoid", (self,))

    def silu(self):
        return _apply("silu", (self,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(const(t) for t in tensors)
    axis = axis % tensors[0].ndim
    return _apply("concat", tensors, axis=axis)


# ---------------------------------------------------------------------------
# vector-Jacobian products, all expressed with taped ops
# ---------------------------------------------------------------------------

def _vjp_matmul(g, node):
    a, b = node.inputs
    ga = (g @ b.T).sum_to(a.shape) if a.requires_grad else None
    gb = None
    if b.requires_grad:
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = (a.T @ g).sum_to(b.shape)
    return ga, gb


def _vjp_sum(g, node, axis, keepdims):
    (a,) = node.inputs
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        shape = list(a.shape)
        for ax in axes:
            shape[ax % a.ndim] = 1
        g = g.reshape(shape)
    elif axis is None and not keepdims:
        g = g.reshape((1,) * a.ndim)
    return (g.broadcast_to(a.shape),)


def _vjp_sigmoid(g, node):
    s = node.out
    return (g * (s - s * s),)


def _vjp_silu(g, node):
    (a,) = node.inputs
    s = a.sigmoid()
    return (g * (s + a * (s - s * s)),)


def _vjp_concat(g, node, axis):
    parts, start = [], 0
    for t in node.inputs:
        stop = start + t.shape[axis]
        parts.append(g.slice(axis, start, stop) if t.requires_grad else None)
        start = stop
    return tuple(parts)


_VJP: dict[str, Callable[..., tuple]] = {
    "add": lambda g, node: (g.sum_to(node.inputs[0].shape), g.sum_to(node.inputs[1].shape)),
    "sub": lambda g, node: (g.sum_to(node.inputs[0].shape), -(g.sum_to(node.inputs[1].shape))),
    "mul": lambda g, node: ((g * node.inputs[1]).sum_to(node.inputs[0].shape)
                            if node.inputs[0].requires_grad else None,
                            (g * node.inputs[0]).sum_to(node.inputs[1].shape)
                            if node.inputs[1].requires_grad else None),
    "neg": lambda g, node: (-g,),
    "scale": lambda g, node, c: (g.scale(c),),
    "matmul": _vjp_matmul,
    "transpose": lambda g, node: (g.T,),
    "reshape": lambda g, node, shape: (g.reshape(node.inputs[0].shape),),
    "sum": _vjp_sum,
    "mean": lambda g, node: (g.scale(1.0 / node.inputs[0].data.size)
                             .reshape((1,) * node.inputs[0].ndim)
                             .broadcast_to(node.inputs[0].shape),),
    "sum_sq": lambda g, node: ((node.inputs[0] * g).scale(2.0),),
    "broadcast_to": lambda g, node, shape: (g.sum_to(node.inputs[0].shape),),
    "sum_to": lambda g, node, shape: (g.broadcast_to(node.inputs[0].shape),),
    "relu": lambda g, node: (g * const(node.inputs[0].data > 0),),
    "sin": lambda g, node: (g * node.inputs[0].cos(),),
    "cos": lambda g, node: (-(g * node.inputs[0].sin()),),
    "sigmoid": _vjp_sigmoid,
    "silu": _vjp_silu,
    "concat": _vjp_concat,
    "slice": lambda g, node, axis, start, stop: (g.pad(axis, start, node.inputs[0].shape[axis]),),
    "pad": lambda g, node, axis, start, total: (g.slice(axis, start, start + node.inputs[0].shape[axis]),),
}

PRIMITIVES = frozenset(_FORWARD)


# ---------------------------------------------------------------------------
# public differentiation entry points
# ---------------------------------------------------------------------------

def _as_arrays(params) -> list[np.ndarray]:
    if not params:
        raise ValueError("params must be non-empty")
    return [p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64) for p in params]


def value_and_grad(f: Callable[..., Tensor], params: Sequence) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``f(*params)`` and its gradient w.r.t. every param."""
    arrays = _as_arrays(params)
    with Tape() as tape:
        leaves = [tape.watch(a) for a in arrays]
        out = f(*leaves)
        grads = tape.grad(out, leaves)
    return float(out.data), [g.data for g in grads]


def grad_through_inner_loop(
    loss: Callable[..., Tensor],
    inner_steps: int,
    inner_lr: float,
    global_params: Sequence,
    init_z,
    first_order: bool = False,
) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Outer gradient after ``inner_steps`` gradient-descent steps on ``z``.

    ``loss(*global_params, z)`` is used both for the inner updates
    ``z <- z - inner_lr * dloss/dz`` and for the final outer loss. In the
    default (second-order) mode the returned gradients account for the
    dependence of the adapted ``z`` on the global parameters. With
    ``first_order`` the adapted ``z`` is treated as a constant.

    Returns ``(outer_loss, grads_wrt_global_params, adapted_z)``.
    """
    if inner_steps < 0:
        raise ValueError("inner_steps must be >= 0")
    arrays = _as_arrays(global_params)
    with Tape() as tape:
        leaves = [tape.watch(a) for a in arrays]
        if inner_steps == 0:
            z = const(np.asarray(init_z, dtype=np.float64))
        else:
            z = tape.watch(np.asarray(init_z, dtype=np.float64))
        for _ in range(inner_steps):
            inner = loss(*leaves, z)
            (gz,) = tape.grad(inner, [z], create_graph=not first_order)
            if not np.isfinite(gz.data).all():
                raise NonFiniteError(gz.node, "inner-gradient")
            z = z - gz.scale(inner_lr)
        out = loss(*leaves, z)
        grads = tape.grad(out, leaves)
    return float(out.data), [g.data for g in grads], z.data.copy()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                state: AdamState, lr: float) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam step; returns new params and a new state."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and Adam moments differ in length")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, step, b1, b2, state.eps)
