"""Dense float64 tensors and a tape-based reverse-mode differentiator.

A computation is recorded by calling :func:`forward` with a *builder*: a
callable that receives one :class:`Var` per leaf tensor and composes the
primitives defined here. :func:`backward` then replays the tape in reverse
and returns the gradient of the scalar loss for the requested leaves.

Only a small, closed set of primitives is supported. Shapes must match
exactly; the single exception is bias addition (matrix + row vector).
Every primitive checks that its result is finite, so NaN/Inf never
escapes into user code.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Var",
    "Tape",
    "GradientResult",
    "ShapeError",
    "NonFiniteError",
    "forward",
    "backward",
    "value_and_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "affine",
    "relu",
    "tanh",
    "sigmoid",
    "softmax_cross_entropy",
    "mean",
    "sum",
    "l2sq",
    "log",
    "clip",
    "sign",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf (overflow, log of non-positive, ...)."""

    def __init__(self, primitive: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: non-finite result")


class Tensor:
    """Immutable dense float64 array with shape metadata.

    ``Tensor(values)`` copies ``values``; the stored buffer is read-only.
    Works with ``np.asarray`` so tensors can be handed to numpy directly.
    """

    __slots__ = ("_data",)

    def __init__(self, values, shape=None):
        arr = np.array(values, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        if any(n <= 0 for n in arr.shape):
            raise ShapeError("tensor", arr.shape)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor")
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        """Row-major read-only view of the values."""
        return self._data

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else _raise_item(self)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __len__(self):
        return self._data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={np.array2string(self._data, threshold=8)})"


def _raise_item(t: Tensor):
    raise ValueError(f"item() requires a single-element tensor, got shape {t.shape}")


def _checked(primitive: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(primitive)
    return arr


class _Node:
    __slots__ = ("op", "inputs", "value", "rule", "needs_grad")

    def __init__(self, op, inputs, value, rule, needs_grad):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.rule = rule
        self.needs_grad = needs_grad


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they are computed, so operands always precede the
    nodes that consume them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[int] = []
        self.leaf_tensors: list[Tensor] = []
        self.output: int | None = None

    def _push(self, op, inputs, value, rule) -> "Var":
        needs = any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(_Node(op, tuple(inputs), value, rule, needs))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, tensor: Tensor) -> "Var":
        arr = np.asarray(tensor)
        self.nodes.append(_Node("leaf", (), arr, None, True))
        self.leaves.append(len(self.nodes) - 1)
        self.leaf_tensors.append(tensor)
        return Var(self, len(self.nodes) - 1)

    def const(self, values) -> "Var":
        """Record a gradient-free constant."""
        arr = _checked("const", np.asarray(values, dtype=np.float64))
        self.nodes.append(_Node("const", (), arr, None, False))
        return Var(self, len(self.nodes) - 1)

    def value(self, var: "Var") -> np.ndarray:
        return self.nodes[var.index].value

    def __len__(self):
        return len(self.nodes)


class Var:
    """Handle to a node on a :class:`Tape`; supports ``+ - * @`` and negation."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(np.full(self.shape, float(other)))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


def _tape_of(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError("operands recorded on different tapes")
    return tape


# --- primitives -----------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        rule = lambda g, ins, out: (g, g)
    elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        rule = lambda g, ins, out: (g, g.sum(axis=0))
    else:
        raise ShapeError("add", av.shape, bv.shape)
    return tape._push("add", (a.index, b.index), _checked("add", av + bv), rule)


def sub(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError("sub", av.shape, bv.shape)
    return tape._push("sub", (a.index, b.index), _checked("sub", av - bv), lambda g, ins, out: (g, -g))


def mul(a: Var, b: Var) -> Var:
    """Elementwise product."""
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError("mul", av.shape, bv.shape)
    return tape._push(
        "mul", (a.index, b.index), _checked("mul", av * bv), lambda g, ins, out: (g * ins[1], g * ins[0])
    )


def scale(a: Var, c: float) -> Var:
    """Multiply by a fixed real constant."""
    c = float(c)
    return a.tape._push("scale", (a.index,), _checked("scale", a.value * c), lambda g, ins, out: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)
    return tape._push(
        "matmul",
        (a.index, b.index),
        _checked("matmul", av @ bv),
        lambda g, ins, out: (g @ ins[1].T, ins[0].T @ g),
    )


def affine(x: Var, w: Var, b: Var) -> Var:
    """``x @ w + b`` for x (n, i), w (i, o), b (o,)."""
    tape = _tape_of(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError("affine", xv.shape, wv.shape)
    if bv.shape != (wv.shape[1],):
        raise ShapeError("affine", wv.shape, bv.shape)
    return tape._push(
        "affine",
        (x.index, w.index, b.index),
        _checked("affine", xv @ wv + bv),
        lambda g, ins, out: (g @ ins[1].T, ins[0].T @ g, g.sum(axis=0)),
    )


def relu(a: Var) -> Var:
    return a.tape._push("relu", (a.index,), np.maximum(a.value, 0.0), lambda g, ins, out: (g * (ins[0] > 0),))


def tanh(a: Var) -> Var:
    return a.tape._push("tanh", (a.index,), np.tanh(a.value), lambda g, ins, out: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows; sigmoid(0) is exactly 0.5
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Var) -> Var:
    return a.tape._push("sigmoid", (a.index,), _sigmoid(a.value), lambda g, ins, out: (g * out * (1.0 - out),))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Var, targets) -> Var:
    """Per-row cross-entropy ``-sum_k t_k log softmax(logits)_k``.

    ``targets`` is either an integer label vector of length n or an (n, k)
    matrix of target probabilities (treated as a constant). Returns shape (n,).
    """
    z = logits.value
    if z.ndim != 2:
        raise ShapeError("softmax_cross_entropy", z.shape)
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != z.shape[0]:
            raise ShapeError("softmax_cross_entropy", z.shape, t.shape)
        labels = t.astype(np.int64)
        if labels.min() < 0 or labels.max() >= z.shape[1]:
            raise ValueError(f"softmax_cross_entropy: labels outside [0, {z.shape[1]})")
        t = np.zeros_like(z)
        t[np.arange(z.shape[0]), labels] = 1.0
    else:
        t = t.astype(np.float64)
        if t.shape != z.shape:
            raise ShapeError("softmax_cross_entropy", z.shape, t.shape)
    logp = _log_softmax(z)
    out = _checked("softmax_cross_entropy", -(t * logp).sum(axis=1))
    mass = t.sum(axis=1, keepdims=True)

    def rule(g, ins, out):
        return (g[:, None] * (np.exp(logp) * mass - t),)

    return logits.tape._push("softmax_cross_entropy", (logits.index,), out, rule)


def mean(a: Var) -> Var:
    n = a.value.size
    return a.tape._push(
        "mean", (a.index,), np.asarray(a.value.mean()), lambda g, ins, out: (np.full(ins[0].shape, g / n),)
    )


def sum(a: Var, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy naming
    """Sum of all elements (scalar) or along ``axis``."""
    v = a.value
    if axis is None:
        return a.tape._push("sum", (a.index,), np.asarray(v.sum()), lambda g, ins, out: (np.full(ins[0].shape, g),))
    if v.ndim != 2 or axis not in (0, 1):
        raise ShapeError("sum", v.shape)
    if axis == 1:
        rule = lambda g, ins, out: (np.repeat(g[:, None], ins[0].shape[1], axis=1),)
    else:
        rule = lambda g, ins, out: (np.repeat(g[None, :], ins[0].shape[0], axis=0),)
    return a.tape._push("sum", (a.index,), v.sum(axis=axis), rule)


def l2sq(a: Var, axis: int | None = None) -> Var:
    """Squared L2 norm of the whole tensor, or per row with ``axis=1``."""
    v = a.value
    if axis is None:
        out = np.asarray((v * v).sum())
        rule = lambda g, ins, out: (2.0 * g * ins[0],)
    elif axis == 1 and v.ndim == 2:
        out = (v * v).sum(axis=1)
        rule = lambda g, ins, out: (2.0 * g[:, None] * ins[0],)
    else:
        raise ShapeError("l2sq", v.shape)
    return a.tape._push("l2sq", (a.index,), _checked("l2sq", out), rule)


def log(a: Var) -> Var:
    v = a.value
    if (v <= 0).any():
        raise NonFiniteError("log")
    return a.tape._push("log", (a.index,), np.log(v), lambda g, ins, out: (g / ins[0],))


def clip(a: Var, lo: float, hi: float) -> Var:
    """Clamp to [lo, hi]; gradient passes through unchanged inside, 0 outside."""
    if lo > hi:
        raise ValueError(f"clip: lo={lo} > hi={hi}")
    return a.tape._push(
        "clip",
        (a.index,),
        np.clip(a.value, lo, hi),
        lambda g, ins, out: (g * ((ins[0] >= lo) & (ins[0] <= hi)),),
    )


def sign(a: Var) -> Var:
    """Elementwise sign with sign(0) = 0 and zero gradient everywhere."""
    return a.tape._push("sign", (a.index,), np.sign(a.value), lambda g, ins, out: (np.zeros_like(ins[0]),))


# --- driver -----------------------------------------------------------------


@dataclass(frozen=True)
class GradientResult:
    """Loss value plus gradients keyed by leaf position in the ``leaves`` list."""

    loss: float
    gradients: dict[int, Tensor]

    def __getitem__(self, key: int) -> Tensor:
        return self.gradients[key]


def forward(builder: Callable[..., Var], leaves: Sequence) -> tuple[float, Tape]:
    """Run ``builder(*leaf_vars)`` on a fresh tape.

    The builder must return a single-element Var; its value is the loss.
    """
    tape = Tape()
    leaf_vars = [tape.leaf(t if isinstance(t, Tensor) else Tensor(t)) for t in leaves]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = builder(*leaf_vars)
    if not isinstance(out, Var) or out.tape is not tape:
        raise TypeError("builder must return a Var recorded on the provided tape")
    if out.value.size != 1:
        raise ShapeError("forward (loss must be scalar)", out.value.shape)
    tape.output = out.index
    return float(out.value.reshape(-1)[0]), tape


def _resolve(tape: Tape, key) -> int:
    if isinstance(key, Tensor):
        for i, t in enumerate(tape.leaf_tensors):
            if t is key:
                return i
        raise KeyError("tensor is not a leaf of this tape")
    if isinstance(key, (int, np.integer)) and 0 <= key < len(tape.leaves):
        return int(key)
    raise KeyError(f"unknown leaf id {key!r}")


def backward(tape: Tape, wrt: Sequence) -> GradientResult:
    """Reverse sweep over ``tape``. ``wrt`` holds leaf positions or leaf Tensors."""
    if tape.output is None:
        raise ValueError("tape has no output; build it with forward()")
    if len(wrt) == 0:
        raise ValueError("wrt must name at least one leaf")
    positions = [_resolve(tape, k) for k in wrt]
    if len(set(positions)) != len(positions):
        raise ValueError("duplicate leaf in wrt")

    nodes = tape.nodes
    adj: list[np.ndarray | None] = [None] * len(nodes)
    out_node = nodes[tape.output]
    adj[tape.output] = np.ones_like(out_node.value)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for i in range(tape.output, -1, -1):
            node = nodes[i]
            g = adj[i]
            if g is None or node.rule is None or not node.needs_grad:
                continue
            ins = [nodes[j].value for j in node.inputs]
            for j, gj in zip(node.inputs, node.rule(g, ins, node.value)):
                if not nodes[j].needs_grad:
                    continue
                gj = np.asarray(gj, dtype=np.float64).reshape(nodes[j].value.shape)
                adj[j] = gj if adj[j] is None else adj[j] + gj

    grads = {}
    for p in positions:
        node_id = tape.leaves[p]
        g = adj[node_id]
        if g is None:
            g = np.zeros_like(nodes[node_id].value)
        grads[p] = Tensor(_checked("backward", g))
    return GradientResult(float(out_node.value.reshape(-1)[0]), grads)


def value_and_grad(builder: Callable[..., Var], leaves: Sequence, wrt: Sequence | None = None) -> GradientResult:
    """forward + backward in one call; differentiates all leaves by default."""
    _, tape = forward(builder, leaves)
    return backward(tape, list(range(len(leaves))) if wrt is None else wrt)
