"""Dense tensors and a small reverse-mode differentiation tape.

Values are numpy arrays in row-major (C) order. A :class:`Node` wraps a
value together with the closure that pushes its gradient back to its
parents; :func:`backward` walks the graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.float64


class TensorError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def fast_mode() -> Iterator[None]:
    """Temporarily build float32 tensors. Gradient checks assume float64."""
    global _DTYPE
    previous, _DTYPE = _DTYPE, np.float32
    try:
        yield
    finally:
        _DTYPE = previous


class Tensor:
    """Shape-checked, contiguous real array.

    Thin value carrier; arithmetic happens on ``.data`` with numpy.
    """

    __slots__ = ("data",)

    def __init__(self, data, shape: Sequence[int] | None = None, check_finite: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=_DTYPE))
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if arr.size != int(np.prod(shape)):
                raise TensorError(f"{arr.size} values do not fill shape {list(shape)}")
            arr = arr.reshape(shape)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s < 1 for s in arr.shape):
            raise TensorError(f"all dimensions must be >= 1, got {list(arr.shape)}")
        if check_finite and not np.all(np.isfinite(arr)):
            raise TensorError("tensor contains NaN or Inf")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, idx):
        return self.data[idx]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)})"


def tensor_create(shape: Sequence[int], fill=0.0) -> Tensor:
    """Create a tensor of ``shape`` from a scalar fill or a flat value list."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise TensorError(f"shape must be nonempty with dims >= 1, got {list(shape)}")
    if np.isscalar(fill):
        return Tensor(np.full(shape, fill, dtype=_DTYPE))
    values = np.asarray(fill, dtype=_DTYPE).ravel()
    if values.size != int(np.prod(shape)):
        raise TensorError(f"{values.size} values given for shape {list(shape)}")
    return Tensor(values, shape)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """A value in the differentiation graph.

    ``backward_fn`` maps the upstream gradient to one gradient (or None)
    per parent, in parent order.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward_fn: BackwardFn | None = None,
        name: str = "",
        requires_grad: bool | None = None,
    ):
        if isinstance(value, Tensor):
            value = value.data
        self.value = np.asarray(value, dtype=value.dtype if isinstance(value, np.ndarray) else _DTYPE)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={list(self.shape)})"


def leaf(value, name: str = "", requires_grad: bool = True) -> Node:
    return Node(value, name=name, requires_grad=requires_grad)


def constant(value, name: str = "") -> Node:
    return Node(value, name=name, requires_grad=False)


def _topological_order(root: Node) -> list[Node]:
    # iterative three-colour DFS; grey-on-grey means a cycle
    order: list[Node] = []
    state: dict[int, int] = {}
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            s = state.get(key)
            if s == 2:
                continue
            if s == 1:
                raise GraphError(f"cycle detected at {node!r}")
            state[key] = 1
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            if parent.requires_grad:
                ps = state.get(id(parent))
                if ps == 1:
                    raise GraphError(f"cycle detected at {parent!r}")
                if ps is None:
                    stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Backpropagate from a one-element ``loss`` node.

    Every visited node gets ``.grad`` set; the returned dict maps each
    reachable leaf that requires grad to its gradient. Contributions from
    several consumers are summed.
    """
    if loss.value.size != 1:
        raise TensorError(f"loss must hold a single value, got shape {list(loss.shape)}")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                leaves[node] = g
            continue
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.value.shape:
                raise GraphError(
                    f"gradient shape {list(pg.shape)} != value shape {list(parent.value.shape)} for {parent!r}"
                )
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
    return leaves


# Elementary ops used by tests and by the loss plumbing.

def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise TensorError(f"add: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise TensorError(f"mul: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Node) -> Node:
    shape = a.shape
    return Node(np.array([a.value.sum()]), (a,), lambda g: (np.full(shape, g[0], dtype=g.dtype),))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    old = a.shape
    return Node(a.value.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))
