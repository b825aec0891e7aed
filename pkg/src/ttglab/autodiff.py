"""Reverse-mode automatic differentiation on a flat numpy tape.

Every computation is recorded as an append-only list of nodes holding
float64 arrays. Backward passes are themselves traced onto the same tape,
which is what makes gradients-of-gradients (differentiating through one
SGD step) work without any special casing.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

Array = np.ndarray
GradMap = dict[str, Array]

FULL_SECOND_ORDER = "full_second_order"
FIRST_ORDER = "first_order"


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf; carries the op name and node index."""

    def __init__(self, op: str, index: int, detail: str = ""):
        self.op = op
        self.index = index
        msg = f"non-finite values produced by op '{op}' at node {index}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ReplayMismatchError(RuntimeError):
    """Replaying the tape did not reproduce the recorded values bit-exactly."""


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class _Op:
    forward: Callable[[list[Array], dict], Array] | None
    vjp: Callable[["Var", list["Var"], "Var", dict], Sequence["Var | None"]] | None


_OPS: dict[str, _Op] = {}


def _register(name: str, forward, vjp) -> None:
    _OPS[name] = _Op(forward, vjp)


class _Node:
    __slots__ = ("op", "inputs", "value", "attrs", "name")

    def __init__(self, op: str, inputs: tuple[int, ...], value: Array,
                 attrs: dict | None, name: str | None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs or {}
        self.name = name


class Tape:
    """Append-only record of operations; confined to one logical execution."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op: str, inputs: tuple[int, ...], value: Array,
                attrs: dict | None = None, name: str | None = None) -> "Var":
        # Recorded values are treated as immutable from here on.
        value = _as_f64(value)
        if value.size and not np.all(np.isfinite(value)):
            raise NonFiniteError(op, len(self.nodes), name or "")
        self.nodes.append(_Node(op, inputs, value, attrs, name))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> "Var":
        """Register a differentiable parameter."""
        return self._record("leaf", (), value, name=name)

    def constant(self, value) -> "Var":
        """Register a value that never receives gradient."""
        return self._record("constant", (), value)

    def replay(self) -> None:
        """Recompute every recorded op from its inputs; raise unless bit-exact."""
        for idx, node in enumerate(self.nodes):
            fwd = _OPS[node.op].forward
            if fwd is None:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            redone = _as_f64(fwd(vals, node.attrs))
            if redone.shape != node.value.shape or not np.array_equal(
                    redone, node.value, equal_nan=True):
                raise ReplayMismatchError(
                    f"replay of op '{node.op}' at node {idx} diverged")


class Var:
    """Handle to one tape node; cheap to copy, immutable value."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Array:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Var":
        return self.tape.constant(self.value)

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return self.tape.constant(other)

    # arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return _apply("add", self, self._lift(other))

    def __radd__(self, other):
        return _apply("add", self._lift(other), self)

    def __sub__(self, other):
        return _apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return _apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return _apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return _apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        return _apply("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return _apply("div", self._lift(other), self)

    def __neg__(self):
        return _apply("neg", self)

    def __pow__(self, p):
        return _apply("pow_const", self, p=float(p))

    def __matmul__(self, other):
        return _apply("matmul", self, self._lift(other))

    @property
    def T(self) -> "Var":
        return _apply("transpose", self)

    def sum(self, axis=None, keepdims: bool = False) -> "Var":
        if isinstance(axis, int):
            axis = (axis,)
        return _apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Var":
        n = self.value.size if axis is None else int(
            np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape) -> "Var":
        return _apply("reshape", self, shape=tuple(shape))

    def broadcast_to(self, shape) -> "Var":
        return _apply("broadcast_to", self, shape=tuple(shape))


def _apply(op: str, *inputs: Var, **attrs) -> Var:
    tape = inputs[0].tape
    vals = [v.value for v in inputs]
    with np.errstate(all="ignore"):  # NonFiniteError is the reporting path
        out = _OPS[op].forward(vals, attrs)
    return tape._record(op, tuple(v.idx for v in inputs), out, attrs)


# elementwise functions -----------------------------------------------------

def exp(x: Var) -> Var:
    return _apply("exp", x)


def log(x: Var) -> Var:
    return _apply("log", x)


def relu(x: Var) -> Var:
    return _apply("relu", x)


def sigmoid(x: Var) -> Var:
    return _apply("sigmoid", x)


def softplus(x: Var) -> Var:
    return _apply("softplus", x)


def clip_min(x: Var, bound: float) -> Var:
    """max(x, bound); clamped entries get zero gradient."""
    return _apply("clip_min", x, bound=float(bound))


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    return _apply("concat", *parts, axis=int(axis))


def slice_axis(x: Var, axis: int, start: int, stop: int) -> Var:
    return _apply("slice_axis", x, axis=int(axis), start=int(start), stop=int(stop))


def straight_through(hard: Var, soft: Var) -> Var:
    """Forward the hard value, route the gradient to the soft surrogate."""
    return _apply("straight_through", hard, soft)


# vjp helpers ----------------------------------------------------------------

def _unbroadcast(g: Var, shape: tuple[int, ...]) -> Var:
    """Reduce a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape))
                 if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        g = g.reshape(shape)
    return g


def _slice_tuple(ndim: int, axis: int, start: int, stop: int):
    sl = [slice(None)] * ndim
    sl[axis] = slice(start, stop)
    return tuple(sl)


# op registry ----------------------------------------------------------------

_register("leaf", None, None)
_register("constant", None, None)

_register("add",
          lambda v, a: v[0] + v[1],
          lambda g, ins, out, a: (_unbroadcast(g, ins[0].shape),
                                  _unbroadcast(g, ins[1].shape)))
_register("sub",
          lambda v, a: v[0] - v[1],
          lambda g, ins, out, a: (_unbroadcast(g, ins[0].shape),
                                  _unbroadcast(-g, ins[1].shape)))
_register("mul",
          lambda v, a: v[0] * v[1],
          lambda g, ins, out, a: (_unbroadcast(g * ins[1], ins[0].shape),
                                  _unbroadcast(g * ins[0], ins[1].shape)))
_register("div",
          lambda v, a: v[0] / v[1],
          lambda g, ins, out, a: (_unbroadcast(g / ins[1], ins[0].shape),
                                  _unbroadcast(-(g * out / ins[1]), ins[1].shape)))
_register("neg",
          lambda v, a: -v[0],
          lambda g, ins, out, a: (-g,))
_register("exp",
          lambda v, a: np.exp(v[0]),
          lambda g, ins, out, a: (g * out,))
_register("log",
          lambda v, a: np.log(v[0]),
          lambda g, ins, out, a: (g / ins[0],))
_register("relu",
          lambda v, a: np.maximum(v[0], 0.0),
          lambda g, ins, out, a: (g * g.tape.constant(ins[0].value > 0.0),))
_register("sigmoid",
          lambda v, a: 1.0 / (1.0 + np.exp(-v[0])),
          lambda g, ins, out, a: (g * out * (1.0 - out),))
_register("softplus",
          lambda v, a: np.logaddexp(0.0, v[0]),
          lambda g, ins, out, a: (g * sigmoid(ins[0]),))
_register("pow_const",
          lambda v, a: v[0] ** a["p"],
          lambda g, ins, out, a: (g * a["p"] * (ins[0] ** (a["p"] - 1.0))
                                  if a["p"] != 1.0 else g,))
_register("clip_min",
          lambda v, a: np.maximum(v[0], a["bound"]),
          lambda g, ins, out, a: (g * g.tape.constant(ins[0].value > a["bound"]),))
_register("matmul",
          lambda v, a: v[0] @ v[1],
          lambda g, ins, out, a: (g @ ins[1].T, ins[0].T @ g))
_register("transpose",
          lambda v, a: v[0].T,
          lambda g, ins, out, a: (g.T,))
_register("reshape",
          lambda v, a: v[0].reshape(a["shape"]),
          lambda g, ins, out, a: (g.reshape(ins[0].shape),))
_register("broadcast_to",
          lambda v, a: np.broadcast_to(v[0], a["shape"]),
          lambda g, ins, out, a: (_unbroadcast(g, ins[0].shape),))
_register("straight_through",
          lambda v, a: v[0],
          lambda g, ins, out, a: (None, g))


def _sum_fwd(v, a):
    return np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"])


def _sum_vjp(g, ins, out, a):
    x = ins[0]
    if not a["keepdims"] and a["axis"] is not None:
        kshape = list(x.shape)
        for ax in a["axis"]:
            kshape[ax] = 1
        g = g.reshape(kshape)
    elif not a["keepdims"]:
        g = g.reshape((1,) * x.ndim)
    return (g.broadcast_to(x.shape),)


_register("sum", _sum_fwd, _sum_vjp)


def _concat_fwd(v, a):
    return np.concatenate(v, axis=a["axis"])


def _concat_vjp(g, ins, out, a):
    axis = a["axis"]
    grads, start = [], 0
    for x in ins:
        stop = start + x.shape[axis]
        grads.append(slice_axis(g, axis, start, stop))
        start = stop
    return tuple(grads)


_register("concat", _concat_fwd, _concat_vjp)

_register("slice_axis",
          lambda v, a: v[0][_slice_tuple(v[0].ndim, a["axis"], a["start"], a["stop"])],
          lambda g, ins, out, a: (_apply("embed_slice", g, axis=a["axis"],
                                         start=a["start"], stop=a["stop"],
                                         size=ins[0].shape[a["axis"]]),))


def _embed_fwd(v, a):
    g = v[0]
    shape = list(g.shape)
    shape[a["axis"]] = a["size"]
    full = np.zeros(shape)
    full[_slice_tuple(g.ndim, a["axis"], a["start"], a["stop"])] = g
    return full


_register("embed_slice", _embed_fwd,
          lambda g, ins, out, a: (slice_axis(g, a["axis"], a["start"], a["stop"]),))


# gradient machinery ----------------------------------------------------------

def gradients(output: Var, wrt: Sequence[Var]) -> list[Var]:
    """Traced adjoints of a scalar output with respect to `wrt` nodes.

    The returned adjoints are Vars on the same tape, so they can be
    differentiated again (second-order).
    """
    if output.shape != ():
        raise ValueError(f"gradient target must be scalar, got shape {output.shape}")
    tape = output.tape
    needed: set[int] = set()
    stack = [output.idx]
    while stack:
        i = stack.pop()
        if i in needed:
            continue
        needed.add(i)
        stack.extend(tape.nodes[i].inputs)

    adjoint: dict[int, Var] = {output.idx: tape.constant(1.0)}
    for idx in range(output.idx, -1, -1):
        if idx not in needed or idx not in adjoint:
            continue
        node = tape.nodes[idx]
        rule = _OPS[node.op].vjp
        if rule is None:
            continue
        g = adjoint[idx]
        in_vars = [Var(tape, i) for i in node.inputs]
        for ivar, gi in zip(in_vars, rule(g, in_vars, Var(tape, idx), node.attrs)):
            if gi is None:
                continue
            prev = adjoint.get(ivar.idx)
            adjoint[ivar.idx] = gi if prev is None else prev + gi
    out = []
    for v in wrt:
        a = adjoint.get(v.idx)
        out.append(a if a is not None else tape.constant(np.zeros(v.shape)))
    return out


LossFn = Callable[[dict[str, Var]], Var]


def _lift_params(tape: Tape, params: Mapping[str, Array]) -> dict[str, Var]:
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


def value_and_grad(f: LossFn, params: Mapping[str, Array]) -> tuple[float, GradMap]:
    """Evaluate a scalar computation and its exact reverse-mode gradients."""
    tape = Tape()
    leaves = _lift_params(tape, params)
    out = f(leaves)
    grads = gradients(out, list(leaves.values()))
    return out.item(), {k: g.value for k, g in zip(leaves, grads)}


def evaluate(f: LossFn, params: Mapping[str, Array]) -> float:
    """Run a scalar computation on a throwaway tape."""
    tape = Tape()
    return f(_lift_params(tape, params)).item()


def finite_diff_grad(f: LossFn, params: Mapping[str, Array],
                     eps: float = 1e-5) -> GradMap:
    """Central-difference gradient oracle, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: _as_f64(v).copy() for k, v in params.items()}
    grads: GradMap = {}
    for k, v in work.items():
        g = np.zeros_like(v)
        flat_v, flat_g = v.reshape(-1), g.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + eps
            hi = evaluate(f, work)
            flat_v[i] = orig - eps
            lo = evaluate(f, work)
            flat_v[i] = orig
            flat_g[i] = (hi - lo) / (2.0 * eps)
        grads[k] = g
    return grads


def grad_through_update(outer_loss: LossFn, inner_loss: LossFn,
                        params: Mapping[str, Array], inner_lr: float,
                        mode: str = FULL_SECOND_ORDER) -> GradMap:
    """Gradient of outer_loss(params - inner_lr * grad(inner_loss)) w.r.t. params.

    full_second_order differentiates through the inner gradient; first_order
    treats the inner gradient as a constant.
    """
    if inner_lr < 0:
        raise ValueError("inner_lr must be >= 0")
    if mode not in (FULL_SECOND_ORDER, FIRST_ORDER):
        raise ValueError(f"unknown mode {mode!r}")
    tape = Tape()
    leaves = _lift_params(tape, params)
    inner_grads = gradients(inner_loss(leaves), list(leaves.values()))
    if mode == FIRST_ORDER:
        inner_grads = [g.detach() for g in inner_grads]
    updated = {k: leaf - inner_lr * g
               for (k, leaf), g in zip(leaves.items(), inner_grads)}
    outer_grads = gradients(outer_loss(updated), list(leaves.values()))
    return {k: g.value for k, g in zip(leaves, outer_grads)}
