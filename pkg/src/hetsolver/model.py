"""Heterogeneous graph attention solver network.

Pipeline per sample: kind-specific encoders -> L relation-aware attention
layers -> physics-conditioned gate -> kind-specific decoders producing
normalised next-frame deltas.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .errors import ChannelMismatch, CheckpointError, ShapeMismatch
from .hetgraph import CROSS, INTRA, HeteroGraph, NodeKind, NodeWindow, RelationKind

KINDS = (NodeKind.FLUID, NodeKind.SOLID)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    layers: int = 4
    window: int = 10
    pos_dim: int = 1
    time_dim: int = 8
    phys_dim: int = 7
    in_channels: tuple[int, int] = (2, 2)
    out_channels: tuple[int, int] = (2, 2)
    activation: str = "relu"
    time_min_freq: float = 1.0
    time_max_freq: float = 1000.0

    def input_width(self, kind: NodeKind) -> int:
        return self.window * self.in_channels[kind] + self.pos_dim + self.time_dim


@dataclass(frozen=True)
class Ablation:
    no_pcgm: bool = False
    no_learnable_agg: bool = False
    no_time_embed: bool = False
    no_physics: bool = False
    homogeneous: bool = False

    @classmethod
    def named(cls, name: str) -> "Ablation":
        if name in ("full", "none", ""):
            return cls()
        parts = name.split("+")
        for part in parts:
            if part not in ABLATION_NAMES:
                raise ValueError(f"unknown ablation {part!r}; choose from {sorted(ABLATION_NAMES)}")
        return cls(**{part: True for part in parts})

    @property
    def label(self) -> str:
        on = [f.name for f in fields(self) if getattr(self, f.name)]
        return "+".join(on) if on else "full"

    def to_bits(self) -> int:
        return sum(1 << i for i, f in enumerate(fields(self)) if getattr(self, f.name))

    @classmethod
    def from_bits(cls, bits: int) -> "Ablation":
        return cls(**{f.name: bool(bits >> i & 1) for i, f in enumerate(fields(cls))})


ABLATION_NAMES = tuple(f.name for f in fields(Ablation))


class ModelParams:
    """All learnable tensors, kept in a fixed declared order."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict(
            (k, Tensor(t.data.copy(), requires_grad=True, name=k)) for k, t in self.tensors.items()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d = config.d
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    for kind in KINDS:
        tag = kind.name.lower()
        shapes[f"enc_{tag}.w1"] = (config.input_width(kind), d)
        shapes[f"enc_{tag}.b1"] = (d,)
        shapes[f"enc_{tag}.w2"] = (d, d)
        shapes[f"enc_{tag}.b2"] = (d,)
    for layer in range(config.layers):
        for rel in RelationKind:
            for proj in ("wq", "wk", "wv"):
                shapes[f"layer{layer}.{rel.name.lower()}.{proj}"] = (d, d)
            shapes[f"layer{layer}.{rel.name.lower()}.a"] = (d,)
        shapes[f"layer{layer}.ln_gain"] = (d,)
        shapes[f"layer{layer}.ln_bias"] = (d,)
    # Logits of w_self / w_cross, indexed by NodeKind; exponentiated on use.
    shapes["agg.self_logit"] = (2,)
    shapes["agg.cross_logit"] = (2,)
    shapes["gate.w"] = (2 * d + config.phys_dim,)
    shapes["gate.b"] = ()
    for kind in KINDS:
        tag = kind.name.lower()
        shapes[f"dec_{tag}.w1"] = (d, d)
        shapes[f"dec_{tag}.b1"] = (d,)
        shapes[f"dec_{tag}.w2"] = (d, config.out_channels[kind])
        shapes[f"dec_{tag}.b2"] = (config.out_channels[kind],)
    shapes["log_var_fluid"] = ()
    shapes["log_var_solid"] = ()
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        elif leaf == "a":
            value = rng.uniform(-0.1, 0.1, size=shape)
        elif leaf == "ln_gain":
            value = np.ones(shape)
        elif name == "gate.w":
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        else:
            value = np.zeros(shape)
        tensors[name] = Tensor(value, requires_grad=True, name=name)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------- batching


@dataclass(eq=False)
class RelationBlock:
    src: np.ndarray
    dst: np.ndarray
    seg: Segments


@dataclass(eq=False)
class GraphBatch:
    """One disjoint-union graph built from one or more samples."""

    kinds: np.ndarray
    kind_rows: dict
    inv_perm: np.ndarray
    relations: dict
    merged: RelationBlock
    positions: np.ndarray
    state: np.ndarray
    physics: np.ndarray
    dt: np.ndarray
    sample_of: np.ndarray
    num_samples: int

    @property
    def num_nodes(self) -> int:
        return int(self.kinds.shape[0])


def _block(src: np.ndarray, dst: np.ndarray, n: int) -> RelationBlock:
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    return RelationBlock(src, dst, Segments.from_ids(dst, n))


def make_batch(samples: Sequence[tuple[HeteroGraph, NodeWindow]],
               pos_mean: np.ndarray | None = None,
               pos_std: np.ndarray | None = None) -> GraphBatch:
    kinds, positions, state, physics, dt, sample_of = [], [], [], [], [], []
    rel_src: dict = {r: [] for r in RelationKind}
    rel_dst: dict = {r: [] for r in RelationKind}
    offset = 0
    for i, (graph, window) in enumerate(samples):
        n = graph.num_nodes
        if window.state_history.shape[0] != n or window.physics_params.shape[0] != n:
            raise ShapeMismatch("window rows must match graph nodes")
        kinds.append(graph.node_kinds)
        positions.append(graph.positions)
        state.append(window.state_history)
        physics.append(window.physics_params)
        dt.append(np.full(n, float(window.dt)))
        sample_of.append(np.full(n, i))
        for r in RelationKind:
            s, d = graph.relation_edges(r)
            rel_src[r].append(s + offset)
            rel_dst[r].append(d + offset)
        offset += n
    kinds_arr = np.concatenate(kinds).astype(np.int64)
    n = kinds_arr.size
    pos = np.vstack(positions).astype(np.float64)
    if pos_mean is not None:
        pos = (pos - pos_mean) / pos_std
    relations = {r: _block(np.concatenate(rel_src[r]).astype(np.int64),
                           np.concatenate(rel_dst[r]).astype(np.int64), n) for r in RelationKind}
    merged = _block(np.concatenate([relations[r].src for r in RelationKind]),
                    np.concatenate([relations[r].dst for r in RelationKind]), n)
    kind_rows = {k: np.flatnonzero(kinds_arr == k) for k in KINDS}
    # Position of each node inside concat([fluid rows, solid rows]).
    inv_perm = np.empty(n, dtype=np.int64)
    inv_perm[np.concatenate([kind_rows[k] for k in KINDS])] = np.arange(n)
    return GraphBatch(kinds_arr, kind_rows, inv_perm, relations, merged, pos,
                      np.concatenate(state, axis=0).astype(np.float64),
                      np.vstack(physics).astype(np.float64), np.concatenate(dt),
                      np.concatenate(sample_of), len(samples))


# ---------------------------------------------------------------- network pieces


def _mlp(x, params: ModelParams, prefix: str, activation: str) -> Tensor:
    act = ad.ACTIVATIONS[activation]
    h = act(ad.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return ad.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _merge_rows(parts: dict, batch: GraphBatch) -> Tensor:
    return ad.gather(ad.concat([parts[k] for k in KINDS], axis=0), batch.inv_perm)


def encode(batch: GraphBatch, params: ModelParams, ablation: Ablation = Ablation()) -> Tensor:
    """h0: every node's input row passed through the encoder of its kind."""
    cfg = params.config
    if batch.state.ndim != 3 or batch.state.shape[1] != cfg.window:
        raise ChannelMismatch(f"history length {batch.state.shape[1:2]} != window {cfg.window}")
    if batch.positions.shape[1] != cfg.pos_dim:
        raise ChannelMismatch(f"position width {batch.positions.shape[1]} != {cfg.pos_dim}")
    time = ad.sinusoid_embed(batch.dt, cfg.time_dim, cfg.time_min_freq, cfg.time_max_freq).data
    if ablation.no_time_embed:
        time = np.zeros_like(time)
    parts = {}
    for kind in KINDS:
        rows = batch.kind_rows[kind]
        channels = cfg.in_channels[kind]
        if batch.state.shape[2] < channels:
            raise ChannelMismatch(f"{kind.name.lower()} nodes need {channels} channels")
        hist = batch.state[rows, :, :channels].reshape(rows.size, -1)
        x = np.concatenate([hist, batch.positions[rows], time[rows]], axis=1)
        enc = "enc_fluid" if ablation.homogeneous else f"enc_{kind.name.lower()}"
        parts[kind] = _mlp(x, params, enc, cfg.activation)
    return _merge_rows(parts, batch)


def _relation_message(h: Tensor, block: RelationBlock, params: ModelParams, prefix: str):
    q = ad.matmul(h, params[f"{prefix}.wq"])
    k = ad.matmul(h, params[f"{prefix}.wk"])
    v = ad.matmul(h, params[f"{prefix}.wv"])
    pre = ad.leaky_relu(ad.gather(q, block.dst) + ad.gather(k, block.src))
    energy = ad.matmul(pre, params[f"{prefix}.a"])
    alpha = ad.segment_softmax(energy, block.seg)
    msg = ad.segment_sum(ad.scale(ad.gather(v, block.src), alpha), block.seg)
    return msg, alpha


def aggregate_messages(batch: GraphBatch, h: Tensor, params: ModelParams, layer: int,
                       ablation: Ablation = Ablation(), trace: dict | None = None) -> Tensor:
    """Total incoming message m_i: weighted intra-domain plus cross-domain sums.

    ``trace`` (if given) receives the attention weights and segments of
    every relation that has edges.
    """
    if h.ndim != 2 or h.shape != (batch.num_nodes, params.config.d):
        raise ShapeMismatch(f"features {h.shape} for {batch.num_nodes} nodes")
    if ablation.homogeneous:
        m = ad.Tensor(np.zeros(h.shape))
        if batch.merged.src.size:
            m, alpha = _relation_message(h, batch.merged, params, f"layer{layer}.f2f")
            if trace is not None:
                trace["merged"] = (alpha.data, batch.merged.seg)
        if not ablation.no_learnable_agg:
            w = ad.reshape(ad.gather(ad.exp(params["agg.self_logit"]), [0]), ())
            m = ad.scale(m, w)
    else:
        groups = {}
        for group, rels in (("self", INTRA), ("cross", CROSS)):
            acc = None
            for rel in rels:
                block = batch.relations[rel]
                if block.src.size == 0:
                    continue
                msg, alpha = _relation_message(h, block, params, f"layer{layer}.{rel.name.lower()}")
                if trace is not None:
                    trace[rel] = (alpha.data, block.seg)
                acc = msg if acc is None else acc + msg
            groups[group] = acc
        m = ad.Tensor(np.zeros(h.shape))
        for group in ("self", "cross"):
            if groups[group] is None:
                continue
            if ablation.no_learnable_agg:
                m = m + groups[group]
            else:
                w = ad.gather(ad.exp(params[f"agg.{group}_logit"]), batch.kinds)
                m = m + ad.scale(groups[group], w)
    return m


def attention_layer(batch: GraphBatch, h: Tensor, params: ModelParams, layer: int,
                    ablation: Ablation = Ablation(), trace: dict | None = None) -> Tensor:
    """One residual heterogeneous attention update."""
    m = aggregate_messages(batch, h, params, layer, ablation, trace)
    act = ad.ACTIVATIONS[params.config.activation]
    normed = ad.layer_norm(m, params[f"layer{layer}.ln_gain"], params[f"layer{layer}.ln_bias"])
    return h + act(normed)


def pcgm_gate(h0: Tensor, hl: Tensor, physics: np.ndarray, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Per-node convex blend of encoder and message-passing states.

    Returns ``(h_final, g)`` with ``g = sigmoid(W_g [h0 | hL | p] + b_g)``.
    """
    if h0.shape != hl.shape:
        raise ShapeMismatch(f"gate inputs {h0.shape} vs {hl.shape}")
    if physics.shape != (h0.shape[0], params.config.phys_dim):
        raise ShapeMismatch(f"physics params {physics.shape}")
    z = ad.matmul(ad.concat([h0, hl, physics], axis=1), params["gate.w"]) + params["gate.b"]
    g = ad.sigmoid(z)
    return ad.scale(h0, 1.0 - g) + ad.scale(hl, g), g


def decode(batch: GraphBatch, h_final: Tensor, params: ModelParams,
           ablation: Ablation = Ablation()) -> dict:
    """Normalised state delta per node kind, keyed by NodeKind."""
    cfg = params.config
    out = {}
    for kind in KINDS:
        rows = batch.kind_rows[kind]
        dec = "dec_fluid" if ablation.homogeneous else f"dec_{kind.name.lower()}"
        if ablation.homogeneous and cfg.out_channels[kind] != cfg.out_channels[NodeKind.FLUID]:
            raise ChannelMismatch("the homogeneous variant needs equal channel counts per kind")
        out[kind] = _mlp(ad.gather(h_final, rows), params, dec, cfg.activation)
    return out


@dataclass(eq=False)
class ForwardResult:
    delta: dict
    h0: Tensor
    hl: Tensor
    h_final: Tensor
    gate: Tensor | None
    attention: list = field(default_factory=list)

    def delta_rows(self, batch: GraphBatch) -> np.ndarray:
        """Per-node delta matrix (requires equal channel counts)."""
        return _merge_rows(self.delta, batch).data


def forward(batch: GraphBatch, params: ModelParams, ablation: Ablation = Ablation(),
            keep_attention: bool = False) -> ForwardResult:
    h0 = encode(batch, params, ablation)
    h = h0
    traces = []
    for layer in range(params.config.layers):
        trace = {} if keep_attention else None
        h = attention_layer(batch, h, params, layer, ablation, trace)
        if trace is not None:
            traces.append(trace)
    if ablation.no_pcgm:
        h_final, g = h, None
    else:
        physics = np.zeros_like(batch.physics) if ablation.no_physics else batch.physics
        h_final, g = pcgm_gate(h0, h, physics, params)
    delta = decode(batch, h_final, params, ablation)
    return ForwardResult(delta, h0, h, h_final, g, traces)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"HGATCKPT"
_VERSION = 1
_HEADER = struct.Struct("<8sI12I2d")
_ACTIVATIONS = ("relu", "tanh")


def save_checkpoint(path: str | Path, params: ModelParams, ablation: Ablation = Ablation()) -> None:
    cfg = params.config
    header = _HEADER.pack(
        _MAGIC, _VERSION, cfg.d, cfg.layers, cfg.window, cfg.pos_dim, cfg.time_dim, cfg.phys_dim,
        *cfg.in_channels, *cfg.out_channels, ablation.to_bits(), _ACTIVATIONS.index(cfg.activation),
        cfg.time_min_freq, cfg.time_max_freq,
    )
    body = params.flat().astype("<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + struct.pack("<Q", params.count()) + body)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, Ablation]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 8:
        raise CheckpointError(f"{path}: truncated header")
    fields_ = _HEADER.unpack_from(raw)
    if fields_[0] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if fields_[1] != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {fields_[1]}")
    d, layers, window, pos_dim, time_dim, phys_dim, cif, cis, cof, cos, bits, act = fields_[2:14]
    cfg = ModelConfig(d=d, layers=layers, window=window, pos_dim=pos_dim, time_dim=time_dim,
                      phys_dim=phys_dim, in_channels=(cif, cis), out_channels=(cof, cos),
                      activation=_ACTIVATIONS[act], time_min_freq=fields_[14],
                      time_max_freq=fields_[15])
    (count,) = struct.unpack_from("<Q", raw, _HEADER.size)
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size + 8)
    shapes = param_shapes(cfg)
    if count != values.size or count != sum(int(np.prod(s)) for s in shapes.values()):
        raise CheckpointError(f"{path}: parameter count mismatch")
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    pos = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        tensors[name] = Tensor(values[pos:pos + size].reshape(shape).astype(np.float64),
                               requires_grad=True, name=name)
        pos += size
    return ModelParams(cfg, tensors), Ablation.from_bits(bits)

