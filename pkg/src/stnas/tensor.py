"""Tape-based reverse-mode autodiff over numpy arrays.

A :class:`Graph` is a tape: every operator application appends one node in
execution order, which is therefore a topological order. Parameters live in
:class:`ParamGroup` objects that outlive any single graph; a graph binds them
as leaf tensors and :func:`backward` writes the result into ``ParamGroup.grad``.
"""

from __future__ import annotations

import contextlib
import enum
import weakref
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, StateError

FLOAT32 = np.float32
FLOAT64 = np.float64


class Role(str, enum.Enum):
    FEATURE = "feature"
    PREDICTION_WEIGHT = "prediction_weight"
    PREDICTION_BIAS = "prediction_bias"


@dataclass(eq=False)
class ParamGroup:
    """A named trainable tensor and its gradient buffer."""

    name: str
    value: np.ndarray
    role: Role = Role.FEATURE
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.value.ndim == 0 or 0 in self.value.shape:
            raise DimensionError(f"{self.name}: parameter shape {self.value.shape} has an empty dimension")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def astype(self, dtype) -> "ParamGroup":
        return ParamGroup(self.name, self.value.astype(dtype), self.role)


class Tensor:
    """A value recorded on a graph, with the closure that maps its output grad to input grads."""

    __slots__ = ("data", "_graph", "parents", "backward_fn", "path", "param", "index")

    def __init__(self, data, graph, parents=(), backward_fn=None, path="", param=None):
        self.data = data
        # weak: the graph owns its nodes, a strong back-reference would form a cycle
        self._graph = weakref.ref(graph)
        self.parents = parents
        self.backward_fn = backward_fn
        self.path = path
        self.param = param
        self.index = -1

    @property
    def graph(self) -> "Graph":
        g = self._graph()
        if g is None:
            raise StateError(f"{self.path!r}: the graph that produced this tensor no longer exists")
        return g

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, path={self.path!r})"


class Graph:
    """Execution tape plus the ReLU activation taps captured during forward."""

    def __init__(self, dtype=FLOAT32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Tensor] = []
        self.taps: list[tuple[str, np.ndarray]] = []
        self._scope: list[str] = []
        self._bound: dict[int, Tensor] = {}

    @contextlib.contextmanager
    def scope(self, name: str):
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    def path(self, op: str) -> str:
        return ".".join(self._scope + [op]) if self._scope else op

    def record(self, data, parents, backward_fn, op, param=None) -> Tensor:
        t = Tensor(data, self, tuple(parents), backward_fn, self.path(op), param)
        t.index = len(self.nodes)
        self.nodes.append(t)
        return t

    def input(self, array, name="input") -> Tensor:
        return self.record(np.asarray(array, dtype=self.dtype), (), None, name)

    def param(self, group: ParamGroup) -> Tensor:
        """Bind a parameter as a leaf; repeated binds return the same leaf."""
        t = self._bound.get(id(group))
        if t is None:
            if group.value.dtype != self.dtype:
                raise DimensionError(
                    f"{group.name}: parameter dtype {group.value.dtype} does not match graph dtype {self.dtype}"
                )
            t = self.record(group.value, (), None, group.name, param=group)
            t.path = group.name
            self._bound[id(group)] = t
        return t

    @property
    def bound_params(self) -> list[ParamGroup]:
        return [t.param for t in self._bound.values()]

    def tap_codes(self) -> np.ndarray:
        """Per-sample concatenation of all ReLU on/off masks, shape (n, total_units)."""
        if not self.taps:
            n = self.nodes[0].data.shape[0] if self.nodes else 0
            return np.zeros((n, 0), dtype=bool)
        n = self.taps[0][1].shape[0]
        return np.concatenate([m.reshape(n, -1) for _, m in self.taps], axis=1)


def backward(graph: Graph, output: Tensor, upstream=None):
    """Reverse-mode sweep from ``output``; overwrites ``grad`` of every bound parameter.

    ``upstream`` defaults to ones (so a scalar loss gets d loss/d loss = 1).
    Parameters the output does not depend on receive zero gradients.
    """
    if output._graph() is not graph or output.index < 0 or output.index >= len(graph.nodes) \
            or graph.nodes[output.index] is not output:
        raise StateError(f"backward on {output.path!r}: node was not produced by a forward pass on this graph")
    if upstream is None:
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(upstream, dtype=output.data.dtype)
        if seed.shape != output.data.shape:
            raise DimensionError(f"{output.path}: upstream shape {seed.shape} != output shape {output.data.shape}")
    for p in graph.bound_params:
        p.grad = np.zeros_like(p.value)

    grads: dict[int, np.ndarray] = {output.index: seed}
    for node in reversed(graph.nodes[: output.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.param is not None:
            node.param.grad = np.asarray(g, dtype=node.param.value.dtype).reshape(node.param.value.shape)
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
