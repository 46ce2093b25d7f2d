"""Heterogeneous fluid/solid graph: node kinds, typed relations, construction."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import NoInterfaceEdges, ShapeMismatch

if TYPE_CHECKING:
    from .datagen import OracleGeometry


class NodeKind(enum.IntEnum):
    FLUID = 0
    SOLID = 1


class RelationKind(enum.IntEnum):
    F2F = 0
    S2S = 1
    F2S = 2
    S2F = 3

    @property
    def src_kind(self) -> NodeKind:
        return _ENDPOINTS[self][0]

    @property
    def dst_kind(self) -> NodeKind:
        return _ENDPOINTS[self][1]

    @property
    def is_intra(self) -> bool:
        return self in (RelationKind.F2F, RelationKind.S2S)

    @classmethod
    def between(cls, src: NodeKind, dst: NodeKind) -> "RelationKind":
        for rel, ends in _ENDPOINTS.items():
            if ends == (src, dst):
                return rel
        raise ValueError((src, dst))


_ENDPOINTS = {
    RelationKind.F2F: (NodeKind.FLUID, NodeKind.FLUID),
    RelationKind.S2S: (NodeKind.SOLID, NodeKind.SOLID),
    RelationKind.F2S: (NodeKind.FLUID, NodeKind.SOLID),
    RelationKind.S2F: (NodeKind.SOLID, NodeKind.FLUID),
}

INTRA = (RelationKind.F2F, RelationKind.S2S)
CROSS = (RelationKind.F2S, RelationKind.S2F)


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """Typed nodes and typed directed edges.

    Edges are stored as parallel integer arrays sorted by (relation, dst, src),
    so construction from the same inputs is always byte-identical.
    """

    node_kinds: np.ndarray
    positions: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    interface_flags: np.ndarray

    def __post_init__(self) -> None:
        kinds = np.asarray(self.node_kinds, dtype=np.int8)
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim == 1:
            pos = pos[:, None]
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        rel = np.asarray(self.rel, dtype=np.int8).reshape(-1)
        flags = np.asarray(self.interface_flags, dtype=bool)
        n = kinds.shape[0]
        if pos.shape[0] != n or flags.shape != (n,):
            raise ShapeMismatch("positions/interface_flags must have one row per node")
        if not (src.shape == dst.shape == rel.shape):
            raise ShapeMismatch("edge arrays differ in length")
        order = np.lexsort((src, dst, rel))
        src, dst, rel = src[order], dst[order], rel[order]
        for name, value in (("node_kinds", kinds), ("positions", pos), ("src", src),
                            ("dst", dst), ("rel", rel), ("interface_flags", flags)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        self._validate()

    def _validate(self) -> None:
        n = self.num_nodes
        if self.src.size and (self.src.min() < 0 or self.dst.min() < 0
                              or self.src.max() >= n or self.dst.max() >= n):
            raise ValueError("edge endpoint out of range")
        for r in RelationKind:
            sel = self.rel == r
            if np.any(self.node_kinds[self.src[sel]] != r.src_kind) or np.any(
                self.node_kinds[self.dst[sel]] != r.dst_kind
            ):
                raise ValueError(f"{r.name} edge joins nodes of the wrong kind")
            if r.is_intra:
                fwd = set(zip(self.src[sel].tolist(), self.dst[sel].tolist()))
                if any((j, i) not in fwd for i, j in fwd):
                    raise ValueError(f"{r.name} adjacency is not symmetric")
        for kind, out_rel in ((NodeKind.FLUID, RelationKind.F2S), (NodeKind.SOLID, RelationKind.S2F)):
            flagged = np.flatnonzero(self.interface_flags & (self.node_kinds == kind))
            has_out = np.zeros(n, dtype=bool)
            has_out[self.src[self.rel == out_rel]] = True
            if not np.all(has_out[flagged]):
                raise ValueError(f"interface {kind.name.lower()} node without outgoing {out_rel.name}")

    @property
    def num_nodes(self) -> int:
        return int(self.node_kinds.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def pos_dim(self) -> int:
        return int(self.positions.shape[1])

    def nodes_of(self, kind: NodeKind) -> np.ndarray:
        return np.flatnonzero(self.node_kinds == kind)

    def edge_list(self) -> list[tuple[int, int, RelationKind]]:
        return [(int(s), int(d), RelationKind(int(r))) for s, d, r in zip(self.src, self.dst, self.rel)]

    def count(self, relation: RelationKind) -> int:
        return int(np.count_nonzero(self.rel == relation))

    def relation_edges(self, relation: RelationKind) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) of one relation, sorted by destination then source."""
        sel = self.rel == relation
        return self.src[sel], self.dst[sel]

    def permuted(self, perm: np.ndarray) -> "HeteroGraph":
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return HeteroGraph(self.node_kinds[perm], self.positions[perm], inv[self.src],
                           inv[self.dst], self.rel, self.interface_flags[perm])

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_kinds": [NodeKind(int(k)).name.lower() for k in self.node_kinds],
            "positions": self.positions.tolist(),
            "edges": [[s, d, r.name.lower()] for s, d, r in self.edge_list()],
            "interface_flags": self.interface_flags.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "HeteroGraph":
        kinds = [NodeKind[k.upper()] for k in payload["node_kinds"]]
        edges = payload["edges"]
        return cls(
            node_kinds=np.array(kinds, dtype=np.int8),
            positions=np.array(payload["positions"], dtype=np.float64),
            src=np.array([e[0] for e in edges], dtype=np.int64),
            dst=np.array([e[1] for e in edges], dtype=np.int64),
            rel=np.array([RelationKind[e[2].upper()] for e in edges], dtype=np.int8),
            interface_flags=np.array(payload["interface_flags"], dtype=bool),
        )

    def same_as(self, other: "HeteroGraph") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("node_kinds", "positions", "src", "dst", "rel", "interface_flags")
        )


@dataclass
class NodeWindow:
    """Model input for one sample: normalized history, static physics, frame step.

    ``state_history`` has shape (n, N, C); ``physics_params`` has shape (n, P).
    """

    state_history: np.ndarray
    physics_params: np.ndarray
    dt: float
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def history_length(self) -> int:
        return int(self.state_history.shape[1])


def _grid_edges(shape: tuple[int, ...]) -> list[tuple[int, int]]:
    # 1D chain, or 2D grid indexed as iy * nx + ix.
    pairs: list[tuple[int, int]] = []
    if len(shape) == 1:
        pairs = [(i, i + 1) for i in range(shape[0] - 1)]
    else:
        nx, ny = shape
        for iy in range(ny):
            for ix in range(nx):
                k = iy * nx + ix
                if ix + 1 < nx:
                    pairs.append((k, k + 1))
                if iy + 1 < ny:
                    pairs.append((k, k + nx))
    return pairs


def build_graph(geometry: "OracleGeometry", interface_radius: float | None = None) -> HeteroGraph:
    """Build the heterogeneous graph of a generated geometry.

    Fluid nodes come first, then solid nodes. Intra-domain edges join grid
    neighbours in both directions; every fluid/solid pair within
    ``interface_radius`` gets one F2S and one S2F edge.
    """
    if geometry.n_fluid < 2 or geometry.n_solid < 1:
        raise ValueError("need at least 2 fluid points and 1 solid point")
    if interface_radius is None:
        interface_radius = 1.5 * geometry.fluid_spacing
    if not interface_radius > 0:
        raise NoInterfaceEdges("interface radius must be positive")
    fpos = np.asarray(geometry.fluid_positions(), dtype=np.float64)
    spos = np.asarray(geometry.solid_positions(), dtype=np.float64)
    if fpos.ndim == 1:
        fpos, spos = fpos[:, None], spos[:, None]
    nf, ns = fpos.shape[0], spos.shape[0]
    if len({tuple(p) for p in fpos.tolist()}) < 2:
        raise ValueError("fluid geometry is degenerate (duplicated points)")

    src: list[int] = []
    dst: list[int] = []
    rel: list[int] = []
    for offset, pairs, r in (
        (0, _grid_edges(geometry.fluid_grid()), RelationKind.F2F),
        (nf, _grid_edges((ns,)), RelationKind.S2S),
    ):
        for a, b in pairs:
            src += [offset + a, offset + b]
            dst += [offset + b, offset + a]
            rel += [r, r]

    dist = np.sqrt(((fpos[:, None, :] - spos[None, :, :]) ** 2).sum(axis=-1))
    fi, si = np.nonzero(dist <= interface_radius)
    if fi.size == 0:
        raise NoInterfaceEdges(f"no fluid-solid pair within radius {interface_radius}")
    flags = np.zeros(nf + ns, dtype=bool)
    for f, s in zip(fi.tolist(), si.tolist()):
        src += [f, nf + s]
        dst += [nf + s, f]
        rel += [RelationKind.F2S, RelationKind.S2F]
        flags[f] = flags[nf + s] = True

    kinds = np.array([NodeKind.FLUID] * nf + [NodeKind.SOLID] * ns, dtype=np.int8)
    return HeteroGraph(kinds, np.vstack([fpos, spos]), np.array(src), np.array(dst),
                       np.array(rel), flags)


def neighbors(graph: HeteroGraph, node: int, relation: RelationKind) -> list[int]:
    """Sources of the ``relation`` edges that end at ``node``, ascending."""
    if not 0 <= node < graph.num_nodes:
        raise IndexError(node)
    sel = (graph.dst == node) & (graph.rel == relation)
    return sorted(graph.src[sel].tolist())
