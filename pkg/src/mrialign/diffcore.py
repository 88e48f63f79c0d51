"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable value is a :class:`Node`. Operations record their parents
and a closure that maps the upstream gradient onto each parent; ``backward``
orders the recorded graph topologically (the tape) and replays it in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class RankError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray <op> Node dispatch to Node's reflected operators

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: take(self, key)


def parameter(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _make(value, parents: Sequence[Node], backward_fn: Callable) -> Node:
    live = [p for p in parents if p.requires_grad]
    if not live:
        return Node(value)
    return Node(value, parents, backward_fn, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Node:
    a, b = constant(a), constant(b)
    out = a.value / b.value
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)))


def scale(a: Node, k: float) -> Node:
    return _make(a.value * k, (a,), lambda g: (g * k,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def clamp_min(a: Node, lo: float) -> Node:
    mask = a.value > lo
    return _make(np.where(mask, a.value, lo), (a,), lambda g: (g * mask,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def rsqrt(a: Node) -> Node:
    out = 1.0 / np.sqrt(a.value)
    return _make(out, (a,), lambda g: (-0.5 * g * out ** 3,))


# ---------------------------------------------------------------- reductions

def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------- shape ops

def reshape(a: Node, shape) -> Node:
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Node, axes: Sequence[int] | None = None) -> Node:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [constant(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a: Node, key) -> Node:
    """Numpy indexing (basic or integer-array); gradients scatter-add back."""
    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.value[key], (a,), back)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Node, b: Node) -> Node:
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, (a, b), back)


def softmax_rows(x: Node) -> Node:
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), back)


def log_softmax_rows(x: Node) -> Node:
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), back)


def normalize_rows(x: Node) -> Node:
    """Scale each vector along the last axis to unit L2 norm."""
    norms = np.sqrt((x.value ** 2).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    out = x.value / norms

    def back(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return _make(out, (x,), back)


def cosine_similarity(u: Node, v: Node) -> Node:
    """Cosine along the last axis; leading axes are treated as a batch."""
    u, v = constant(u), constant(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    return sum(normalize_rows(u) * normalize_rows(v), axis=-1)


def cosine_matrix(a: Node, b: Node) -> Node:
    """All-pairs cosine between rows of ``a`` [n x d] and ``b`` [m x d]."""
    return matmul(normalize_rows(constant(a)), transpose(normalize_rows(constant(b))))


# ---------------------------------------------------------------- tape

class Tape:
    """Topologically ordered list of the nodes that a scalar depends on."""

    def __init__(self, root: Node):
        self.root = root
        self.nodes: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Node) -> Tape:
    """Populate ``grad`` on every node reachable from the scalar ``loss``.

    Leaves accumulate across calls; intermediate nodes are reset per call.
    """
    if loss.value.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    for node in tape:
        if node.parents or node.grad is None:
            node.grad = np.zeros_like(node.value)
    loss.grad = loss.grad + 1.0 if not loss.parents else np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(node.grad)
        for parent, pg in zip(node.parents, parent_grads):
            if parent.requires_grad:
                parent.grad = parent.grad + pg
    return tape


def zero_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(f: Callable[[], Node], params: Sequence[Node], eps: float = 1e-5,
                      max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Largest |analytic - central difference| / max(1, |analytic|) over coordinates.

    ``f`` recomputes the scalar from the current values of ``params``; it must be
    deterministic (freeze sampling and dropout outside it). With ``max_coords``
    a random subset of coordinates is probed per parameter.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    zero_grads(params)
    backward(f())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
