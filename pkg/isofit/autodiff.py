# isofit/autodiff.py
"""
Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records primitive operations in the order they are built, so the
node list is topologically sorted by construction. backward() walks it in
reverse and accumulates adjoints.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation

VjpFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Node:
    __slots__ = ("tape", "index", "value", "parents", "vjp", "name", "requires_grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, parents: Tuple["Node", ...],
                 vjp: Optional[VjpFn], name: Optional[str], requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or f"#{self.index}"
        return f"Node({label}, shape={self.value.shape})"


# ---- Small helpers ----------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


# ---- Tape -------------------------------------------------------------------

class Tape:
    """Ordered record of primitive operations. Single-threaded."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.adjoints: list[Optional[np.ndarray]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _check(self, node: Node) -> Node:
        # inputs must already live on this tape; anything else would break the order
        if not isinstance(node, Node) or node.tape is not self or node.index >= len(self.nodes) \
                or self.nodes[node.index] is not node:
            raise ContractViolation(f"{node!r} is not an earlier node of this tape")
        return node

    def _push(self, value: np.ndarray, parents: Sequence[Node], vjp: Optional[VjpFn],
              name: Optional[str] = None) -> Node:
        parents = tuple(self._check(p) for p in parents)
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, parents, vjp if requires_grad else None, name, requires_grad)
        self.nodes.append(node)
        return node

    # -- leaves

    def param(self, value, name: Optional[str] = None) -> Node:
        """Trainable leaf; backward() returns a gradient for it."""
        node = self._push(_as_array(value), (), None, name)
        node.requires_grad = True
        return node

    def const(self, value, name: Optional[str] = None) -> Node:
        return self._push(_as_array(value), (), None, name)

    # -- elementwise binary

    def add(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape
        return self._push(a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape
        return self._push(a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._push(av * bv, (a, b),
                          lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push(a.value * c, (a,), lambda g: (g * c,))

    # -- linear algebra / structure

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value

        def vjp(g):
            if av.ndim == 1 and bv.ndim == 2:
                return bv @ g, np.outer(av, g)
            if av.ndim == 2 and bv.ndim == 1:
                return np.outer(g, bv), av.T @ g
            return g @ bv.T, av.T @ g

        return self._push(av @ bv, (a, b), vjp)

    def concat(self, nodes: Sequence[Node], axis: int = -1) -> Node:
        values = [n.value for n in nodes]
        sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
        return self._push(np.concatenate(values, axis=axis), nodes,
                          lambda g: tuple(np.split(g, sizes, axis=axis)))

    def cols(self, a: Node, start: int, stop: int) -> Node:
        """Column slice a[..., start:stop]."""
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            out[..., start:stop] = g
            return (out,)

        return self._push(a.value[..., start:stop], (a,), vjp)

    def gather(self, table: Node, index: np.ndarray) -> Node:
        """Row lookup table[index]; repeated indices accumulate their adjoints."""
        index = np.asarray(index, dtype=np.int64)
        tshape = table.shape

        def vjp(g):
            out = np.zeros(tshape)
            np.add.at(out, index.reshape(-1), g.reshape((-1,) + tshape[1:]))
            return (out,)

        return self._push(table.value[index], (table,), vjp)

    # -- elementwise unary

    def softplus(self, a: Node) -> Node:
        x = a.value
        return self._push(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._push(y, (a,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, a: Node) -> Node:
        y = _sigmoid(a.value)
        return self._push(y, (a,), lambda g: (g * y * (1.0 - y),))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0.0
        return self._push(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))

    def abs(self, a: Node) -> Node:
        sign = np.sign(a.value)
        return self._push(np.abs(a.value), (a,), lambda g: (g * sign,))

    def square(self, a: Node) -> Node:
        x = a.value
        return self._push(x * x, (a,), lambda g: (2.0 * g * x,))

    def sqrt(self, a: Node) -> Node:
        y = np.sqrt(a.value)
        return self._push(y, (a,), lambda g: (0.5 * g / y,))

    # -- reductions

    def sum(self, a: Node, axis: Optional[int] = None) -> Node:
        shape = a.shape
        if axis is None:
            return self._push(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
        ax = axis % len(shape)
        return self._push(a.value.sum(axis=ax), (a,),
                          lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))

    def mean(self, a: Node, axis: Optional[int] = None) -> Node:
        n = a.value.size if axis is None else a.shape[axis]
        return self.scale(self.sum(a, axis), 1.0 / n)

    def dot(self, a: Node, weights: np.ndarray) -> Node:
        """Scalar sum(a * weights) with constant weights; seeds vector outputs."""
        return self.sum(self.mul(a, self.const(weights)))


# ---- Backward ---------------------------------------------------------------

def backward(tape: Tape, output: Node, seed: float = 1.0) -> Dict[Node, np.ndarray]:
    """
    Propagate adjoints from a scalar `output` back to every trainable leaf.
    Returns {leaf node: gradient}; leaves the output does not depend on get zeros.
    """
    tape._check(output)
    if output.value.size != 1:
        raise ContractViolation(f"backward() needs a scalar output, got shape {output.shape}")

    adjoints: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    adjoints[output.index] = np.full(output.shape, float(seed))

    for node in reversed(tape.nodes[: output.index + 1]):
        g = adjoints[node.index]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            current = adjoints[parent.index]
            adjoints[parent.index] = pg if current is None else current + pg

    tape.adjoints = adjoints
    return {
        n: (adjoints[n.index] if adjoints[n.index] is not None else np.zeros(n.shape))
        for n in tape.nodes
        if n.requires_grad and not n.parents
    }


def grad_check(fn: Callable[[Tape, Node], Node], point, h: float = 1e-6,
               coords: Optional[Iterable[int]] = None) -> float:
    """
    Compare backward() against central differences of `fn` at `point`.
    `fn(tape, x)` must build a scalar from the leaf `x`.
    Returns max over checked coordinates of |g_ad - g_fd| / max(1, |g_fd|).
    """
    point = _as_array(point)
    tape = Tape()
    x = tape.param(point.copy(), name="x")
    out = fn(tape, x)
    g_ad = backward(tape, out)[x].reshape(-1)

    def value_at(p: np.ndarray) -> float:
        t = Tape()
        return float(fn(t, t.param(p)).value)

    flat = point.reshape(-1)
    worst = 0.0
    for i in (range(flat.size) if coords is None else coords):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        f_plus, f_minus = value_at(plus.reshape(point.shape)), value_at(minus.reshape(point.shape))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ContractViolation(f"non-finite evaluation at coordinate {i}")
        g_fd = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd)))
    return worst


# ---- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: Dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Dict[str, np.ndarray], lr, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> "AdamState":
        """`lr` is a float for every parameter or a callable name -> learning rate."""
        rates = {k: float(lr(k) if callable(lr) else lr) for k in params}
        return cls(
            lr=rates, beta1=beta1, beta2=beta2, eps=eps,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractViolation("params, grads and Adam state must have the same keys")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractViolation(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        new_params[name] = p - state.lr[name] * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = AdamState(lr=dict(state.lr), beta1=state.beta1, beta2=state.beta2, eps=state.eps,
                          step=t, m=new_m, v=new_v)
    return new_params, new_state
