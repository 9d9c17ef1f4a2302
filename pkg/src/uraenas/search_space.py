"""Cell DAG search space, mixed operations and the three-stage macro skeleton."""

from __future__ import annotations

import contextlib
import enum
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError, InvariantError
from .tensor import Tensor

SIMPLEX_TOL = 1e-6


class OpKind(enum.IntEnum):
    ZEROIZE = 0
    SKIP_CONNECT = 1
    CONV1X1 = 2
    CONV3X3 = 3
    AVG_POOL3X3 = 4


OPS: tuple[OpKind, ...] = tuple(OpKind)
NUM_OPS = len(OPS)


class OutputMode(str, enum.Enum):
    LAST_NODE = "last_node"
    CONCAT_INTERMEDIATE = "concat_intermediate"


@dataclass(frozen=True)
class CellTopology:
    num_nodes: int
    input_nodes: int
    edges: tuple[tuple[int, int], ...]
    output_mode: OutputMode
    profile: str = "custom"

    def __post_init__(self):
        if self.input_nodes not in (1, 2):
            raise ConfigError(f"input_nodes must be 1 or 2, got {self.input_nodes}")
        for i, j in self.edges:
            if not 0 <= i < j < self.num_nodes:
                raise ConfigError(f"edge ({i},{j}) violates DAG order over {self.num_nodes} nodes")
            if j < self.input_nodes:
                raise ConfigError(f"edge ({i},{j}) targets an input node")

    @classmethod
    def nb201(cls) -> "CellTopology":
        edges = tuple((i, j) for j in range(1, 4) for i in range(j))
        return cls(4, 1, edges, OutputMode.LAST_NODE, "nb201")

    @classmethod
    def darts(cls, num_nodes: int = 4) -> "CellTopology":
        edges = tuple((i, j) for j in range(2, num_nodes) for i in range(j))
        return cls(num_nodes, 2, edges, OutputMode.CONCAT_INTERMEDIATE, "darts")

    @classmethod
    def from_profile(cls, name: str) -> "CellTopology":
        if name == "nb201":
            return cls.nb201()
        if name == "darts":
            return cls.darts()
        raise ConfigError(f"unknown topology profile {name!r}")

    @property
    def edge_ids(self) -> list[str]:
        return [f"{i}-{j}" for i, j in self.edges]

    @property
    def output_multiplier(self) -> int:
        if self.output_mode is OutputMode.LAST_NODE:
            return 1
        return self.num_nodes - self.input_nodes


@dataclass
class MixedEdge:
    """Learnable kernels of one edge. The mixing weights are supplied per call."""

    conv1x1: Tensor
    conv3x3: Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "MixedEdge":
        return cls(
            Tensor(he_init(rng, (channels, channels, 1, 1)), requires_grad=True),
            Tensor(he_init(rng, (channels, channels, 3, 3)), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.conv1x1, self.conv3x3]


def he_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


_simplex_checks = True


@contextlib.contextmanager
def simplex_checks_disabled():
    """Let theta leave the simplex, e.g. for finite differences along one coordinate."""
    global _simplex_checks
    prev, _simplex_checks = _simplex_checks, False
    try:
        yield
    finally:
        _simplex_checks = prev


def check_simplex(theta: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if not _simplex_checks:
        return
    theta = np.asarray(theta)
    if theta.shape != (NUM_OPS,) or np.any(theta < -tol) or abs(theta.sum() - 1.0) > tol:
        raise InvariantError(f"mixing weights {theta} are not on the {NUM_OPS}-simplex")


def apply_op(op: OpKind, edge: MixedEdge, x: Tensor) -> Tensor | None:
    """Apply one candidate op. ``None`` denotes the zero tensor."""
    if op is OpKind.ZEROIZE:
        return None
    if op is OpKind.SKIP_CONNECT:
        return x
    if op is OpKind.CONV1X1:
        return T.conv2d(T.relu(x), edge.conv1x1, 1, 0)
    if op is OpKind.CONV3X3:
        return T.conv2d(T.relu(x), edge.conv3x3, 1, 1)
    return T.avg_pool3x3(x, 1)


def mixed_op_forward(edge: MixedEdge, theta: Tensor | np.ndarray, x: Tensor) -> Tensor:
    """Return sum_o theta_o * o(x).

    Ops with an exactly-zero weight are skipped when no gradient wrt theta is
    requested (discretized architectures pay for one op per edge).
    """
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    check_simplex(theta.data)
    need_all = theta.requires_grad
    relu_x = None
    outs: list[Tensor | None] = []
    for op in OPS:
        if not need_all and theta.data[op] == 0.0:
            outs.append(None)
            continue
        if op in (OpKind.CONV1X1, OpKind.CONV3X3):
            if relu_x is None:
                relu_x = T.relu(x)
            kernel = edge.conv1x1 if op is OpKind.CONV1X1 else edge.conv3x3
            outs.append(T.conv2d(relu_x, kernel, 1, 0 if op is OpKind.CONV1X1 else 1))
        else:
            outs.append(apply_op(op, edge, x))
    if all(o is None for o in outs):
        return Tensor(np.zeros(x.shape))
    return T.mix(outs, theta)


def cell_forward(
    cell: CellTopology,
    edges: dict[tuple[int, int], MixedEdge],
    thetas: dict[tuple[int, int], Tensor | np.ndarray],
    inputs: Sequence[Tensor],
) -> Tensor:
    if len(inputs) != cell.input_nodes:
        raise InputError(f"cell expects {cell.input_nodes} inputs, got {len(inputs)}")
    nodes: list[Tensor | None] = list(inputs) + [None] * (cell.num_nodes - cell.input_nodes)
    for j in range(cell.input_nodes, cell.num_nodes):
        incoming = []
        for i, jj in cell.edges:
            if jj != j:
                continue
            if (i, j) not in edges or (i, j) not in thetas:
                raise ConfigError(f"missing parameters for edge {i}-{j}")
            if nodes[i] is None:
                raise ConfigError(f"node {i} has no incoming edges")
            incoming.append(mixed_op_forward(edges[(i, j)], thetas[(i, j)], nodes[i]))
        nodes[j] = incoming[0] if len(incoming) == 1 else T.add_n(incoming) if incoming else None
    if cell.output_mode is OutputMode.LAST_NODE:
        out = nodes[-1]
        if out is None:
            raise ConfigError("output node has no incoming edges")
        return out
    inter = nodes[cell.input_nodes :]
    if any(n is None for n in inter):
        raise ConfigError("an intermediate node has no incoming edges")
    return T.concat_channels(inter)


def cell_forward_fused(
    cell: CellTopology,
    edges: dict[tuple[int, int], MixedEdge],
    thetas: dict[tuple[int, int], Tensor | np.ndarray],
    inputs: Sequence[Tensor],
) -> Tensor:
    """Same result as ``cell_forward``; one fused primitive per source node."""
    if len(inputs) != cell.input_nodes:
        raise InputError(f"cell expects {cell.input_nodes} inputs, got {len(inputs)}")
    nodes: list[Tensor | None] = list(inputs) + [None] * (cell.num_nodes - cell.input_nodes)
    incoming: dict[int, list[Tensor]] = {j: [] for j in range(cell.num_nodes)}
    for i in range(cell.num_nodes):
        if i >= cell.input_nodes:
            parts = incoming[i]
            if not parts:
                raise ConfigError(f"node {i} has no incoming edges")
            nodes[i] = parts[0] if len(parts) == 1 else T.add_n(parts)
        out_edges = [(a, b) for a, b in cell.edges if a == i]
        if not out_edges:
            continue
        for e in out_edges:
            if e not in edges or e not in thetas:
                raise ConfigError(f"missing parameters for edge {e[0]}-{e[1]}")
        ths = [thetas[e] if isinstance(thetas[e], Tensor) else Tensor(thetas[e]) for e in out_edges]
        for th in ths:
            check_simplex(th.data)
        x = nodes[i]
        bundle = T.mixed_edges(x, ths, [edges[e].conv1x1 for e in out_edges], [edges[e].conv3x3 for e in out_edges])
        c = x.shape[1]
        for k, (_, j) in enumerate(out_edges):
            part = bundle if len(out_edges) == 1 else T.channel_slice(bundle, k * c, (k + 1) * c)
            incoming[j].append(part)
    if cell.output_mode is OutputMode.LAST_NODE:
        return nodes[-1]
    return T.concat_channels(nodes[cell.input_nodes :])


@dataclass
class DiscreteArch:
    ops: dict[str, OpKind]

    def one_hot(self, topology: CellTopology) -> dict[tuple[int, int], np.ndarray]:
        out = {}
        for (i, j), eid in zip(topology.edges, topology.edge_ids):
            v = np.zeros(NUM_OPS)
            v[self.ops[eid]] = 1.0
            out[(i, j)] = v
        return out

    def to_dict(self) -> dict:
        return {eid: op.name for eid, op in self.ops.items()}


def discretize(mean_theta: dict[str, np.ndarray]) -> DiscreteArch:
    """Per-edge argmax; ties go to the lowest op index."""
    ops = {}
    for eid, v in mean_theta.items():
        v = np.asarray(v)
        check_simplex(v)
        ops[eid] = OpKind(int(np.argmax(v)))
    return DiscreteArch(ops)


@dataclass
class MacroSkeleton:
    c0: int = 8
    n_cells: int = 1
    num_classes: int = 10
    in_channels: int = 3
    topology: CellTopology = field(default_factory=CellTopology.nb201)

    @property
    def channel_plan(self) -> tuple[int, int, int]:
        return (self.c0, 2 * self.c0, 4 * self.c0)


class Supernet:
    """Weight container plus forward pass of the macro skeleton.

    One mixing-weight vector per edge position is shared by every normal cell;
    kernels are per cell.
    """

    def __init__(self, skel: MacroSkeleton, rng: np.random.Generator, fused: bool = True):
        self.skel = skel
        self.fused = fused
        topo = skel.topology
        c0 = skel.c0
        self.stem = Tensor(he_init(rng, (c0, skel.in_channels, 3, 3)), requires_grad=True)
        self.cells: list[list[dict[tuple[int, int], MixedEdge]]] = []
        self.projections: list[list[Tensor]] = []
        self.reductions: list[tuple[Tensor, Tensor]] = []
        for s, c in enumerate(skel.channel_plan):
            stage, proj = [], []
            for _ in range(skel.n_cells):
                stage.append({e: MixedEdge.init(c, rng) for e in topo.edges})
                if topo.output_multiplier > 1:
                    m = topo.output_multiplier
                    proj.append(Tensor(he_init(rng, (c, m * c, 1, 1)), requires_grad=True))
            self.cells.append(stage)
            self.projections.append(proj)
            if s < 2:
                self.reductions.append(
                    (
                        Tensor(he_init(rng, (2 * c, c, 3, 3)), requires_grad=True),
                        Tensor(he_init(rng, (2 * c, c, 1, 1)), requires_grad=True),
                    )
                )
        feat = skel.channel_plan[-1]
        self.head_w = Tensor(rng.standard_normal((feat, skel.num_classes)) * np.sqrt(1.0 / feat), requires_grad=True)
        self.head_b = Tensor(np.zeros(skel.num_classes), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("stem", self.stem)]
        for s, stage in enumerate(self.cells):
            for c, cell in enumerate(stage):
                for (i, j), edge in cell.items():
                    out.append((f"stage{s}.cell{c}.{i}-{j}.conv1x1", edge.conv1x1))
                    out.append((f"stage{s}.cell{c}.{i}-{j}.conv3x3", edge.conv3x3))
                for c2, p in enumerate(self.projections[s]):
                    if c2 == c:
                        out.append((f"stage{s}.cell{c}.proj", p))
            if s < len(self.reductions):
                main, short = self.reductions[s]
                out.append((f"reduction{s}.conv3x3", main))
                out.append((f"reduction{s}.shortcut", short))
        out.append(("head.weight", self.head_w))
        out.append(("head.bias", self.head_b))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        off = 0
        for p in self.parameters():
            n = p.data.size
            p.data = np.array(flat[off : off + n]).reshape(p.data.shape)
            off += n
        if off != flat.size:
            raise DimensionError(f"flat vector has {flat.size} entries, network has {off}")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, x: Tensor | np.ndarray, thetas: dict[tuple[int, int], Tensor | np.ndarray]) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(T.channel_major(x))
        if x.data.ndim != 4 or x.shape[1] != self.skel.in_channels:
            raise InputError(f"expected input [N,{self.skel.in_channels},H,W], got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise InputError(f"spatial dims {x.shape[2:]} must be divisible by 4")
        state = (None, x)
        for _, fn in self.blocks(thetas):
            state = fn(state)
        return state[1]

    def blocks(self, thetas):
        """The forward pass as a chain of (own parameters, state -> state) steps.

        State is the pair (previous cell output, current tensor). Splitting it up
        lets callers cache the prefix when only a later block changes.
        """
        topo = self.skel.topology
        cell_fn = cell_forward_fused if self.fused else cell_forward
        out = [([self.stem], lambda st: (st[1], T.conv2d(st[1], self.stem, 1, 1)))]
        for s, stage in enumerate(self.cells):
            for c, cell_edges in enumerate(stage):
                proj = self.projections[s][c] if self.projections[s] else None

                def cell(st, cell_edges=cell_edges, proj=proj, first=(c == 0)):
                    prev_prev, h = (st[1] if first else st[0]), st[1]
                    inputs = [h] if topo.input_nodes == 1 else [prev_prev, h]
                    o = cell_fn(topo, cell_edges, thetas, inputs)
                    if proj is not None:
                        o = T.conv2d(o, proj, 1, 0)
                    return (h, o)

                params = [p for e in cell_edges.values() for p in e.parameters()] + ([proj] if proj is not None else [])
                out.append((params, cell))
            if s < len(self.reductions):
                red = self.reductions[s]
                out.append((list(red), lambda st, red=red: (st[0], reduction_forward(red, st[1]))))
        head = lambda st: (st[0], T.linear(T.global_avg_pool(T.relu(st[1])), self.head_w, self.head_b))
        out.append(([self.head_w, self.head_b], head))
        return out


def reduction_forward(block: tuple[Tensor, Tensor], x: Tensor) -> Tensor:
    """Fixed residual reduction: halves H and W, doubles channels."""
    main, short = block
    a = T.conv2d(T.relu(x), main, 2, 1)
    b = T.conv2d(T.avg_pool3x3(x, 2), short, 1, 0)
    return T.add(a, b)


def theta_dict(topology: CellTopology, vectors: dict[str, np.ndarray], requires_grad: bool = False):
    """Map edge ids to per-edge tensors keyed by (i, j)."""
    out = {}
    for e, eid in zip(topology.edges, topology.edge_ids):
        out[e] = Tensor(np.asarray(vectors[eid], dtype=np.float64), requires_grad=requires_grad)
    return out


def arch_to_json(topology: CellTopology, skel: MacroSkeleton, theta: dict[str, np.ndarray] | None = None,
                 arch: DiscreteArch | None = None) -> str:
    doc = {
        "profile": topology.profile,
        "num_nodes": topology.num_nodes,
        "input_nodes": topology.input_nodes,
        "output_mode": topology.output_mode.value,
        "edges": topology.edge_ids,
        "ops": [op.name for op in OPS],
        "channel_plan": list(skel.channel_plan),
        "n_cells": skel.n_cells,
    }
    if theta is not None:
        doc["theta"] = {k: [float(x) for x in v] for k, v in theta.items()}
    if arch is not None:
        doc["arch"] = arch.to_dict()
    return json.dumps(doc, indent=2, sort_keys=True)
