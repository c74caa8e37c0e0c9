"""Cell search space: 4-node / 6-edge DAG cells with five candidate operators.

Macro skeleton (three stages, widths C, 2C, 4C)::

    stem(conv3x3 + BN) -> stage1 cells -> residual reduction -> stage2 cells
        -> residual reduction -> stage3 cells -> BN + ReLU -> GAP -> FC

A single-path network and a supernet are the same :class:`CellNetwork`; the
only difference is how many operators are active on each edge.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .errors import ContractError, GenotypeParseError
from .optim import init_weight
from .tensor import FLOAT32, Graph, ParamGroup, Role, Tensor

ZEROIZE, SKIP, CONV1X1, CONV3X3, AVGPOOL = range(5)
OP_NAMES = ("none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3")
NUM_OPS = len(OP_NAMES)
# (to_node, from_node), in canonical genotype order
EDGES = ((1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2))
NUM_EDGES = len(EDGES)
SPACE_SIZE = NUM_OPS ** NUM_EDGES

_KERNEL = {CONV1X1: 1, CONV3X3: 3}


@dataclass(frozen=True)
class CellGenotype:
    edge_ops: tuple[int, ...]

    def __post_init__(self):
        ops_ = tuple(int(o) for o in self.edge_ops)
        if len(ops_) != NUM_EDGES:
            raise GenotypeParseError(f"genotype needs {NUM_EDGES} edges, got {len(ops_)}")
        for i, o in enumerate(ops_):
            if not 0 <= o < NUM_OPS:
                raise GenotypeParseError(f"field {i + 1}: operator id {o} not in 0..{NUM_OPS - 1}", position=i + 1)
        object.__setattr__(self, "edge_ops", ops_)

    @classmethod
    def parse(cls, text: str) -> "CellGenotype":
        """Parse ``"a|b|c|d|e|f"``; fields may be ids or operator names."""
        fields = text.strip().split("|")
        if len(fields) != NUM_EDGES:
            raise GenotypeParseError(f"genotype {text!r} has {len(fields)} fields, expected {NUM_EDGES}")
        out = []
        for i, f in enumerate(fields, start=1):
            f = f.strip()
            if f in OP_NAMES:
                out.append(OP_NAMES.index(f))
                continue
            if not f.isdigit() or int(f) >= NUM_OPS:
                raise GenotypeParseError(f"field {i}: invalid operator {f!r} in genotype {text!r}", position=i)
            out.append(int(f))
        return cls(tuple(out))

    @classmethod
    def from_index(cls, index: int) -> "CellGenotype":
        if not 0 <= index < SPACE_SIZE:
            raise IndexError(index)
        digits = []
        for _ in range(NUM_EDGES):
            index, d = divmod(index, NUM_OPS)
            digits.append(d)
        return cls(tuple(reversed(digits)))

    @property
    def index(self) -> int:
        i = 0
        for o in self.edge_ops:
            i = i * NUM_OPS + o
        return i

    def __str__(self):
        return "|".join(str(o) for o in self.edge_ops)

    def describe(self) -> str:
        return "|".join(f"{OP_NAMES[o]}~{src}" for o, (_, src) in zip(self.edge_ops, EDGES))


@dataclass(frozen=True)
class MacroConfig:
    stem_channels: int = 16
    cells_per_stage: int = 1
    num_stages: int = 3
    num_classes: int = 10
    input_resolution: int = 32
    input_channels: int = 3

    def __post_init__(self):
        if self.stem_channels < 4 or self.stem_channels % 2:
            raise ValueError("stem_channels must be even and >= 4")
        if self.cells_per_stage < 1:
            raise ValueError("cells_per_stage must be >= 1")
        if not 1 <= self.num_stages <= 3:
            raise ValueError("num_stages must be 1, 2 or 3 (searches use 3)")
        if self.input_resolution < 4 or self.input_resolution % 4:
            raise ValueError("input_resolution must be a positive multiple of 4")
        if self.num_classes < 1 or self.input_channels < 1:
            raise ValueError("num_classes and input_channels must be positive")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.stem_channels * 2 ** s for s in range(self.num_stages))


@dataclass(frozen=True)
class SupernetState:
    """Edge x operator activity mask."""

    mask: tuple[tuple[bool, ...], ...]

    def __post_init__(self):
        m = tuple(tuple(bool(v) for v in row) for row in self.mask)
        if len(m) != NUM_EDGES or any(len(r) != NUM_OPS for r in m):
            raise ContractError(f"mask must be {NUM_EDGES}x{NUM_OPS}")
        for e, row in enumerate(m):
            if not any(row):
                raise ContractError(f"edge {e} has no active operator")
        object.__setattr__(self, "mask", m)

    @classmethod
    def full(cls, ops_=range(NUM_OPS)) -> "SupernetState":
        keep = set(ops_)
        return cls(tuple(tuple(o in keep for o in range(NUM_OPS)) for _ in range(NUM_EDGES)))

    @classmethod
    def from_genotype(cls, genotype: CellGenotype) -> "SupernetState":
        return cls(tuple(tuple(o == g for o in range(NUM_OPS)) for g in genotype.edge_ops))

    def active(self, edge: int) -> tuple[int, ...]:
        return tuple(o for o, on in enumerate(self.mask[edge]) if on)

    @property
    def num_active(self) -> int:
        return sum(sum(r) for r in self.mask)

    @property
    def is_single_path(self) -> bool:
        return all(sum(r) == 1 for r in self.mask)

    def to_genotype(self) -> CellGenotype:
        if not self.is_single_path:
            raise ContractError("supernet still has an edge with more than one active operator")
        return CellGenotype(tuple(self.active(e)[0] for e in range(NUM_EDGES)))

    def as_array(self) -> np.ndarray:
        return np.array(self.mask, dtype=bool)


def prune_operator(state: SupernetState, edge: int, op: int) -> SupernetState:
    """Return a copy of ``state`` with ``(edge, op)`` deactivated. Pruned operators cannot return."""
    if not state.mask[edge][op]:
        raise ContractError(f"operator {OP_NAMES[op]} on edge {edge} is not active")
    if len(state.active(edge)) < 2:
        raise ContractError(f"cannot remove the last operator on edge {edge}")
    rows = [list(r) for r in state.mask]
    rows[edge][op] = False
    return SupernetState(tuple(tuple(r) for r in rows))


def _edge_op_params(op: int, c: int) -> int:
    if op in _KERNEL:
        k = _KERNEL[op]
        return k * k * c * c + 2 * c
    return 0


def count_params_mask(state: SupernetState, macro: MacroConfig) -> int:
    """Trainable scalars of the network with the given active operators."""
    chans = macro.stage_channels
    c0 = chans[0]
    total = 9 * macro.input_channels * c0 + 2 * c0
    for s, c in enumerate(chans):
        per_cell = sum(_edge_op_params(o, c) for e in range(NUM_EDGES) for o in state.active(e))
        total += macro.cells_per_stage * per_cell
        if s + 1 < len(chans):
            co = chans[s + 1]
            total += 9 * c * co + 2 * co + 9 * co * co + 2 * co + c * co
    c_last = chans[-1]
    total += 2 * c_last + c_last * macro.num_classes + macro.num_classes
    return total


def count_params(genotype: CellGenotype, macro: MacroConfig) -> int:
    return count_params_mask(SupernetState.from_genotype(genotype), macro)


def enumerate_space(macro: MacroConfig | None = None, param_count: int | None = None) -> Iterator[CellGenotype]:
    """All genotypes in lexicographic order, optionally only those with exactly ``param_count`` parameters."""
    if param_count is not None and macro is None:
        raise ValueError("filtering by #Param needs a macro config")
    for combo in itertools.product(range(NUM_OPS), repeat=NUM_EDGES):
        g = CellGenotype(combo)
        if param_count is None or count_params(g, macro) == param_count:
            yield g


@dataclass(eq=False)
class CellNetwork:
    """An instantiated network. ``state`` selects which operators take part in the forward pass."""

    macro: MacroConfig
    state: SupernetState
    seed: int = 0
    init_scheme: str = "kaiming_uniform"
    dtype: type = FLOAT32
    bn_eps: float = 1e-5
    params: dict[str, ParamGroup] = field(init=False, repr=False)
    _owner: dict[str, tuple[int, int] | None] = field(init=False, repr=False)

    def __post_init__(self):
        self.params = {}
        self._owner = {}
        self._built = self.state
        self._build()

    # -- construction -------------------------------------------------
    def _weight(self, name, shape, owner=None, role=Role.FEATURE):
        value = init_weight(shape, self.init_scheme, self.seed, name, self.dtype)
        self._add(ParamGroup(name, value, role), owner)

    def _bn(self, prefix, c, owner=None):
        self._add(ParamGroup(f"{prefix}.gamma", np.ones(c, dtype=self.dtype)), owner)
        self._add(ParamGroup(f"{prefix}.beta", np.zeros(c, dtype=self.dtype)), owner)

    def _add(self, p, owner):
        self.params[p.name] = p
        self._owner[p.name] = owner

    def _build(self):
        m = self.macro
        chans = m.stage_channels
        self._weight("stem.conv.weight", (chans[0], m.input_channels, 3, 3))
        self._bn("stem.bn", chans[0])
        for s, c in enumerate(chans, start=1):
            for k in range(m.cells_per_stage):
                for e in range(NUM_EDGES):
                    for o in self.state.active(e):
                        if o in _KERNEL:
                            kk = _KERNEL[o]
                            prefix = f"stage{s}.cell{k}.edge{e}.{OP_NAMES[o]}"
                            self._weight(f"{prefix}.conv.weight", (c, c, kk, kk), owner=(e, o))
                            self._bn(f"{prefix}.bn", c, owner=(e, o))
            if s < len(chans):
                co = chans[s]
                self._weight(f"reduce{s}.conv_a.conv.weight", (co, c, 3, 3))
                self._bn(f"reduce{s}.conv_a.bn", co)
                self._weight(f"reduce{s}.conv_b.conv.weight", (co, co, 3, 3))
                self._bn(f"reduce{s}.conv_b.bn", co)
                self._weight(f"reduce{s}.shortcut.conv.weight", (co, c, 1, 1))
        self._bn("head.bn", chans[-1])
        self._weight("classifier.weight", (m.num_classes, chans[-1]), role=Role.PREDICTION_WEIGHT)
        self._add(ParamGroup("classifier.bias", np.zeros(m.num_classes, dtype=self.dtype),
                             Role.PREDICTION_BIAS), None)

    # -- state ----------------------------------------------------------
    def set_state(self, state: SupernetState):
        """Narrow the active set. Operators can only be removed, never re-added."""
        for e in range(NUM_EDGES):
            for o in state.active(e):
                if not self._built.mask[e][o]:
                    raise ContractError(f"operator {OP_NAMES[o]} on edge {e} was never built into this network")
                if not self.state.mask[e][o]:
                    raise ContractError(f"operator {OP_NAMES[o]} on edge {e} was pruned and cannot be re-added")
        self.state = state

    def prune(self, edge: int, op: int):
        self.state = prune_operator(self.state, edge, op)

    def parameters(self) -> list[ParamGroup]:
        """Parameters of the active sub-network, in construction order."""
        out = []
        for name, p in self.params.items():
            owner = self._owner[name]
            if owner is None or self.state.mask[owner[0]][owner[1]]:
                out.append(p)
        return out

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def genotype(self) -> CellGenotype:
        return self.state.to_genotype()

    def astype(self, dtype) -> "CellNetwork":
        clone = copy.copy(self)
        clone.dtype = dtype
        clone.params = {k: p.astype(dtype) for k, p in self.params.items()}
        return clone

    def clone(self) -> "CellNetwork":
        return self.astype(self.dtype)

    # -- forward --------------------------------------------------------
    def _p(self, g: Graph, name: str) -> Tensor:
        return g.param(self.params[name])

    def _relu_conv_bn(self, g, x, prefix, stride=1):
        with g.scope(prefix):
            h = ops.relu(x)
            h = ops.conv2d(h, self._p(g, f"{prefix}.conv.weight"), stride=stride)
            return ops.batchnorm(h, self._p(g, f"{prefix}.bn.gamma"), self._p(g, f"{prefix}.bn.beta"), self.bn_eps)

    @staticmethod
    def _materialize(g, x, like_shape):
        if x is None:
            return g.input(np.zeros(like_shape, dtype=g.dtype), name="zeros")
        return x

    def _edge(self, g, x, shape, prefix, e):
        outs = []
        for o in self.state.active(e):
            if o == ZEROIZE:
                continue
            if o == SKIP:
                if x is not None:
                    outs.append(x)
            elif o == AVGPOOL:
                if x is not None:
                    with g.scope(f"{prefix}.{OP_NAMES[o]}"):
                        outs.append(ops.avgpool3x3(x))
            else:
                outs.append(self._relu_conv_bn(g, self._materialize(g, x, shape), f"{prefix}.{OP_NAMES[o]}"))
        if not outs:
            return None
        with g.scope(prefix):
            return ops.add(*outs)

    def _cell(self, g, x, shape, prefix):
        nodes = [x]
        for j in range(1, 4):
            incoming = []
            for e, (to, src) in enumerate(EDGES):
                if to == j:
                    y = self._edge(g, nodes[src], shape, f"{prefix}.edge{e}", e)
                    if y is not None:
                        incoming.append(y)
            if incoming:
                with g.scope(f"{prefix}.node{j}"):
                    nodes.append(ops.add(*incoming))
            else:
                nodes.append(None)
        return nodes[3]

    def _reduction(self, g, x, prefix):
        a = self._relu_conv_bn(g, x, f"{prefix}.conv_a", stride=2)
        b = self._relu_conv_bn(g, a, f"{prefix}.conv_b")
        with g.scope(f"{prefix}.shortcut"):
            sc = ops.conv2d(ops.avgpool2x2(x), self._p(g, f"{prefix}.shortcut.conv.weight"))
            return ops.add(sc, b)

    def features(self, g: Graph, x: Tensor) -> Tensor:
        """Pre-classifier features, shape (N, channels of the last stage)."""
        m = self.macro
        n = x.data.shape[0]
        with g.scope("stem"):
            h = ops.conv2d(x, self._p(g, "stem.conv.weight"))
            h = ops.batchnorm(h, self._p(g, "stem.bn.gamma"), self._p(g, "stem.bn.beta"), self.bn_eps)
        res = x.data.shape[2]
        for s, c in enumerate(m.stage_channels, start=1):
            shape = (n, c, res, res)
            for k in range(m.cells_per_stage):
                h = self._cell(g, h, shape, f"stage{s}.cell{k}")
            h = self._materialize(g, h, shape)
            if s < m.num_stages:
                h = self._reduction(g, h, f"reduce{s}")
                res //= 2
        with g.scope("head"):
            h = ops.batchnorm(h, self._p(g, "head.bn.gamma"), self._p(g, "head.bn.beta"), self.bn_eps)
            h = ops.relu(h)
            return ops.global_avg_pool(h)

    def forward(self, g: Graph, x: Tensor) -> Tensor:
        f = self.features(g, x)
        with g.scope("classifier"):
            return ops.linear(f, self._p(g, "classifier.weight"), self._p(g, "classifier.bias"))


def build_network(genotype: CellGenotype, macro: MacroConfig, seed: int = 0,
                  init_scheme: str = "kaiming_uniform", dtype=FLOAT32) -> CellNetwork:
    return CellNetwork(macro, SupernetState.from_genotype(genotype), seed, init_scheme, dtype)


def build_supernet(macro: MacroConfig, seed: int = 0, ops_: Sequence[int] = tuple(range(NUM_OPS)),
                   init_scheme: str = "kaiming_uniform", dtype=FLOAT32) -> tuple[CellNetwork, SupernetState]:
    state = SupernetState.full(ops_)
    return CellNetwork(macro, state, seed, init_scheme, dtype), state
