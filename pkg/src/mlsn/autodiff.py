"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is a tape: every primitive is evaluated eagerly when it is
added, its output cached on the returned :class:`Node`, and ``backward``
walks the tape in reverse.  Parameters live in :class:`ParamSet` objects and
receive accumulated gradients in their :class:`Tensor` grad buffers.

Shape rules (no general broadcasting):

* ``affine(x, W, b)``: ``x`` is ``(n, in)`` or ``(in,)``, ``W`` is
  ``(out, in)``, ``b`` is ``(out,)``; result ``x @ W.T + b``.
* elementwise binary ops (``add``, ``sub``, ``product``, ``abs_diff``)
  require identical shapes.
* ``concat_columns`` joins two 2-D arrays with the same row count.
* ``softmax_rows`` needs a 2-D input.
* ``reduce_sum`` / ``reduce_mean`` collapse everything to a scalar.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GraphStateError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, values, grad=None):
        self.data = np.array(values, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        self.grad = None if grad is None else np.array(grad, dtype=np.float64)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} does not match values {self.data.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


@dataclass
class ParamSet:
    entries: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __setitem__(self, name: str, tensor: Tensor) -> None:
        self.entries[name] = tensor

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.zero_grad()

    def copy(self) -> "ParamSet":
        return ParamSet({k: Tensor(v.data.copy()) for k, v in self.entries.items()})


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Node:
    __slots__ = ("graph", "index", "kind", "parents", "value", "grad", "_backward", "tensor")

    def __init__(self, graph, index, kind, parents, value, backward=None, tensor=None):
        self.graph = graph
        self.index = index
        self.kind = kind
        self.parents = parents
        self.value = value
        self.grad = None
        self._backward = backward
        self.tensor = tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"node {self.index} ({self.kind}) is not scalar")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Node(#{self.index} {self.kind} shape={self.shape})"


def _same_shape(kind: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f"{kind}: operand shapes differ, node #{a.index} {a.shape} vs node #{b.index} {b.shape}"
        )


class Graph:
    """Tape of primitive operations.  One backward pass per graph."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._done = False

    def _push(self, kind, parents, value, backward=None, tensor=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite output at node #{len(self.nodes)} ({kind})")
        node = Node(self, len(self.nodes), kind, parents, value, backward, tensor)
        self.nodes.append(node)
        return node

    def _check_own(self, *nodes: Node) -> None:
        for n in nodes:
            if n.graph is not self:
                raise GraphStateError(f"node #{n.index} ({n.kind}) belongs to another graph")

    # leaves

    def input(self, values) -> Node:
        """Constant leaf; receives a gradient but never updates anything."""
        arr = np.array(values, dtype=np.float64)
        return self._push("input", (), arr)

    def param(self, tensor: Tensor) -> Node:
        return self._push("parameter", (), tensor.data, tensor=tensor)

    # primitives

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        self._check_own(x, w, b)
        if w.value.ndim != 2 or b.value.shape != (w.shape[0],) or x.shape[-1] != w.shape[1]:
            raise ShapeError(
                f"affine: incompatible shapes x{x.shape} W{w.shape} b{b.shape} "
                f"at node #{len(self.nodes)}"
            )
        out = x.value @ w.value.T + b.value

        def back(g):
            x2 = x.value.reshape(-1, w.shape[1])
            g2 = g.reshape(-1, w.shape[0])
            return (g2 @ w.value).reshape(x.shape), g2.T @ x2, g2.sum(axis=0)

        return self._push("affine", (x, w, b), out, back)

    def relu(self, a: Node) -> Node:
        self._check_own(a)
        mask = a.value > 0
        return self._push("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))

    def sigmoid(self, a: Node) -> Node:
        self._check_own(a)
        x = a.value
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self._push("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))

    def softmax_rows(self, a: Node) -> Node:
        self._check_own(a)
        if a.value.ndim != 2:
            raise ShapeError(f"softmax_rows: node #{a.index} has shape {a.shape}, need 2-D")
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

        return self._push("softmax-rows", (a,), out, back)

    def concat_columns(self, a: Node, b: Node) -> Node:
        self._check_own(a, b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeError(
                f"concat_columns: node #{a.index} {a.shape} and node #{b.index} {b.shape}"
            )
        k = a.shape[1]
        return self._push(
            "concat-columns", (a, b), np.concatenate([a.value, b.value], axis=1),
            lambda g: (g[:, :k], g[:, k:]),
        )

    def abs_diff(self, a: Node, b: Node) -> Node:
        self._check_own(a, b)
        _same_shape("abs_diff", a, b)
        d = a.value - b.value
        s = np.sign(d)
        return self._push("elementwise-abs-diff", (a, b), np.abs(d), lambda g: (g * s, -g * s))

    def product(self, a: Node, b: Node) -> Node:
        self._check_own(a, b)
        _same_shape("product", a, b)
        av, bv = a.value, b.value
        return self._push("elementwise-product", (a, b), av * bv, lambda g: (g * bv, g * av))

    def add(self, a: Node, b: Node) -> Node:
        self._check_own(a, b)
        _same_shape("add", a, b)
        return self._push("add", (a, b), a.value + b.value, lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        self._check_own(a, b)
        _same_shape("sub", a, b)
        return self._push("sub", (a, b), a.value - b.value, lambda g: (g, -g))

    def reduce_sum(self, a: Node) -> Node:
        self._check_own(a)
        shape = a.shape
        return self._push(
            "reduce-sum", (a,), np.array([a.value.sum()]),
            lambda g: (np.full(shape, g[0]),),
        )

    def reduce_mean(self, a: Node) -> Node:
        self._check_own(a)
        shape, n = a.shape, a.value.size
        if n == 0:
            raise ShapeError(f"reduce_mean: node #{a.index} is empty")
        return self._push(
            "reduce-mean", (a,), np.array([a.value.sum() / n]),
            lambda g: (np.full(shape, g[0] / n),),
        )

    def log(self, a: Node, lo: float = LOG_FLOOR, hi: float = 1.0) -> Node:
        """Natural log of ``a`` clamped to ``[lo, hi]``; zero gradient where clamped."""
        self._check_own(a)
        c = np.clip(a.value, lo, hi)
        inside = (a.value >= lo) & (a.value <= hi)
        return self._push("log", (a,), np.log(c), lambda g: (np.where(inside, g / c, 0.0),))

    def power(self, a: Node, exponent: float) -> Node:
        self._check_own(a)
        x = a.value
        if exponent == 0:
            return self._push("power", (a,), np.ones_like(x), lambda g: (np.zeros_like(g),))
        out = x**exponent
        return self._push(
            "power", (a,), out, lambda g: (g * exponent * x ** (exponent - 1),)
        )

    def scalar_scale(self, a: Node, c: float) -> Node:
        self._check_own(a)
        return self._push("scalar-scale", (a,), a.value * c, lambda g: (g * c,))

    def scalar_add(self, a: Node, c: float) -> Node:
        self._check_own(a)
        return self._push("scalar-add", (a,), a.value + c, lambda g: (g,))

    def clamp(self, a: Node, lo: float, hi: float) -> Node:
        self._check_own(a)
        inside = (a.value >= lo) & (a.value <= hi)
        return self._push("clamp", (a,), np.clip(a.value, lo, hi),
                          lambda g: (np.where(inside, g, 0.0),))

    def gather_rows(self, a: Node, index) -> Node:
        self._check_own(a)
        idx = np.asarray(index, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise ShapeError(f"gather_rows: index out of range for node #{a.index} {a.shape}")
        shape = a.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return self._push("gather-rows", (a,), a.value[idx], back)

    # reverse pass

    def backward(self, root: Node) -> None:
        if not self.nodes:
            raise GraphStateError("backward called before any forward computation")
        if self._done:
            raise GraphStateError("backward already applied to this graph")
        self._check_own(root)
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, node #{root.index} has {root.shape}")
        self._done = True
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            g = node.grad
            if g is None:
                continue
            if node.tensor is not None:
                t = node.tensor
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg
        for node in self.nodes:
            if node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise NumericError(f"non-finite gradient at node #{node.index} ({node.kind})")


def forward(build: Callable[[Graph], Node], graph: Graph | None = None) -> tuple[Graph, Node]:
    """Run ``build`` on a fresh (or given) graph and return it with its root."""
    g = Graph() if graph is None else graph
    root = build(g)
    return g, root


def backward(graph: Graph, root: Node) -> None:
    graph.backward(root)


def grad_check(
    build: Callable[[Graph], Node],
    params: ParamSet | list[ParamSet],
    epsilon: float = 1e-6,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``build`` must rebuild the whole scalar computation from the current
    parameter values each time it is called.
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in (0, 1e-3], got {epsilon}")
    sets = [params] if isinstance(params, ParamSet) else list(params)
    tensors = [t for ps in sets for t in ps.entries.values()]
    for t in tensors:
        t.zero_grad()
    g, root = forward(build)
    g.backward(root)
    analytic = [t.grad.copy() for t in tensors]

    def value() -> float:
        return forward(build)[1].item()

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = value()
            flat[k] = orig - epsilon
            down = value()
            flat[k] = orig
            num = (up - down) / (2 * epsilon)
            denom = max(abs(a_flat[k]), abs(num), 1e-12)
            worst = max(worst, abs(a_flat[k] - num) / denom)
    return worst
