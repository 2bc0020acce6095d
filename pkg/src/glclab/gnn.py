"""Heterogeneous graphs, a multi-head GAT layer and the graph-to-output (G2O) stack.

Node types are projected by their own weight matrices into one shared
hidden space. Every edge type has its own attention vector; scores of all
edge types entering a node are normalised together, so a destination
aggregates messages across edge types jointly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import Linear, Module, glorot


class SchemaError(ad.GraphError):
    pass


@dataclass(frozen=True)
class EdgeType:
    src: str
    dst: str
    dim: int = 0  # 0 means featureless


@dataclass(frozen=True)
class GraphSchema:
    node_types: tuple  # ((name, feature_dim, count), ...) in row order
    edge_types: tuple  # ((name, EdgeType), ...)

    @property
    def node_dims(self) -> dict[str, int]:
        return {n: d for n, d, _ in self.node_types}

    @property
    def node_counts(self) -> dict[str, int]:
        return {n: c for n, _, c in self.node_types}

    @property
    def offsets(self) -> dict[str, int]:
        out, acc = {}, 0
        for n, _, c in self.node_types:
            out[n] = acc
            acc += c
        return out

    @property
    def num_nodes(self) -> int:
        return sum(c for _, _, c in self.node_types)

    @property
    def edges(self) -> dict[str, EdgeType]:
        return dict(self.edge_types)


@dataclass
class EdgeSet:
    src_type: str
    dst_type: str
    index: np.ndarray  # (2, E): local source / destination indices
    features: np.ndarray | None = None  # (E, dim)


@dataclass
class HeteroGraph:
    nodes: dict  # type -> (n_t, d_t) array or Tensor
    edges: dict  # edge type name -> EdgeSet
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def validate(self, schema: GraphSchema | None = None):
        for name, es in self.edges.items():
            for role, t, row in (("source", es.src_type, 0), ("destination", es.dst_type, 1)):
                if t not in self.nodes:
                    raise SchemaError(f"edge type {name!r}: unknown {role} node type {t!r}")
                n = len(self.nodes[t])
                idx = np.asarray(es.index[row])
                if idx.size and (idx.min() < 0 or idx.max() >= n):
                    raise SchemaError(f"edge type {name!r}: {role} index out of range for {t!r}")
            if es.features is not None and len(es.features) != np.asarray(es.index).shape[1]:
                raise SchemaError(f"edge type {name!r}: one feature row per edge required")
        if schema is None:
            return
        for n, d, c in schema.node_types:
            if n not in self.nodes:
                raise SchemaError(f"node type {n!r} missing from graph")
            shape = np.shape(self.nodes[n].data if isinstance(self.nodes[n], ad.Tensor) else self.nodes[n])
            if shape != (c, d):
                raise SchemaError(f"node type {n!r}: expected shape {(c, d)}, got {shape}")
        extra = set(self.nodes) - set(schema.node_dims)
        if extra:
            raise SchemaError(f"node type {sorted(extra)[0]!r} not in schema")
        declared = schema.edges
        for name, es in self.edges.items():
            if name not in declared:
                raise SchemaError(f"edge type {name!r} not in schema")
            et = declared[name]
            if (es.src_type, es.dst_type) != (et.src, et.dst):
                raise SchemaError(f"edge type {name!r}: endpoints do not match schema")
            dim = 0 if es.features is None else np.shape(es.features)[1]
            if dim != et.dim:
                raise SchemaError(f"edge type {name!r}: feature dim {dim} != {et.dim}")

    def global_edges(self, schema: GraphSchema):
        """Concatenated (src, dst, type id, padded edge features) over all edge types.

        Cached on the graph: the topology is fixed while node features change.
        """
        if "edges" in self._cache:
            return self._cache["edges"]
        off = schema.offsets
        names = [n for n, _ in schema.edge_types]
        dims = [et.dim for _, et in schema.edge_types]
        col0 = np.concatenate([[0], np.cumsum(dims)])
        src, dst, tid, feats = [], [], [], []
        for t, name in enumerate(names):
            es = self.edges.get(name)
            if es is None:
                continue
            idx = np.asarray(es.index, dtype=np.intp)
            e = idx.shape[1]
            src.append(idx[0] + off[es.src_type])
            dst.append(idx[1] + off[es.dst_type])
            tid.append(np.full(e, t))
            block = np.zeros((e, int(col0[-1])))
            if dims[t]:
                block[:, col0[t]:col0[t + 1]] = es.features
            feats.append(block)
        out = (np.concatenate(src), np.concatenate(dst), np.concatenate(tid),
               np.concatenate(feats) if col0[-1] else None)
        self._cache["edges"] = out
        return out


def fully_connected(n: int) -> np.ndarray:
    """Directed edges between every ordered pair of distinct nodes."""
    src, dst = np.nonzero(~np.eye(n, dtype=bool))
    return np.vstack([src, dst])


class GatLayer(Module):
    """Multi-head graph attention over a heterogeneous graph."""

    def __init__(self, schema: GraphSchema, in_dims: dict[str, int], heads: int,
                 head_dim: int, concat: bool, rng: np.random.Generator,
                 negative_slope: float = 0.2):
        self.schema = schema
        self.heads, self.head_dim, self.concat = heads, head_dim, concat
        self.negative_slope = negative_slope
        width = heads * head_dim
        self.proj = {t: ad.tensor(glorot(rng, in_dims[t], width), requires_grad=True)
                     for t, _, _ in schema.node_types}
        n_et = len(schema.edge_types)
        scale = np.sqrt(6.0 / (head_dim + 1))
        self.att_dst = ad.tensor(rng.uniform(-scale, scale, (n_et, heads, head_dim)), requires_grad=True)
        self.att_src = ad.tensor(rng.uniform(-scale, scale, (n_et, heads, head_dim)), requires_grad=True)
        edge_dim = sum(et.dim for _, et in schema.edge_types)
        self.edge_proj = None
        if edge_dim:
            self.edge_proj = ad.tensor(glorot(rng, edge_dim, width), requires_grad=True)
            self.att_edge = ad.tensor(rng.uniform(-scale, scale, (n_et, heads, head_dim)),
                                      requires_grad=True)

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim if self.concat else self.head_dim

    def _project(self, feats: dict) -> ad.Tensor:
        parts = [ad.matmul(ad.constant(feats[t]), self.proj[t]) for t, _, _ in self.schema.node_types]
        h = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return ad.reshape(h, (-1, self.heads, self.head_dim))

    def _scores(self, h, graph: HeteroGraph):
        src, dst, tid, efeat = graph.global_edges(self.schema)
        hd = ad.gather_rows(h, dst)
        hs = ad.gather_rows(h, src)
        raw = ad.mul(hd, ad.gather_rows(self.att_dst, tid)) + ad.mul(hs, ad.gather_rows(self.att_src, tid))
        if self.edge_proj is not None:
            he = ad.reshape(ad.matmul(ad.constant(efeat), self.edge_proj), (-1, self.heads, self.head_dim))
            raw = raw + ad.mul(he, ad.gather_rows(self.att_edge, tid))
        return ad.leaky_relu(ad.sum(raw, axis=2), self.negative_slope), src, dst

    def attention(self, feats: dict, graph: HeteroGraph) -> ad.Tensor:
        """Normalised coefficients alpha, shape (E_total, heads), edges in schema order."""
        h = self._project(feats)
        scores, _, dst = self._scores(h, graph)
        return ad.segment_softmax(scores, dst, self.schema.num_nodes)

    def __call__(self, feats: dict, graph: HeteroGraph) -> ad.Tensor:
        h = self._project(feats)
        scores, src, dst = self._scores(h, graph)
        n = self.schema.num_nodes
        alpha = ad.segment_softmax(scores, dst, n)
        msg = ad.mul(ad.gather_rows(h, src), ad.reshape(alpha, (-1, self.heads, 1)))
        agg = ad.segment_sum(msg, dst, n)
        if self.concat:
            return ad.reshape(agg, (n, self.heads * self.head_dim))
        return ad.mean(agg, axis=1)


class G2O(Module):
    """Stack of (GAT + dense map over the flattened node features) -> ReLU layers."""

    def __init__(self, schema: GraphSchema, rng: np.random.Generator, hidden: int = 32,
                 heads: int = 2, out_dim: int = 16, layers: int = 2, final_concat: bool = False):
        self.schema = schema
        self.gat, self.dense = [], []
        dims = schema.node_dims
        n = schema.num_nodes
        for layer in range(layers):
            last = layer == layers - 1
            if last:
                concat = final_concat
                head_dim = out_dim // heads if concat else out_dim
            else:
                concat, head_dim = True, hidden // heads
            gat = GatLayer(schema, dims, heads, head_dim, concat, rng)
            flat_in = sum(dims[t] * c for t, _, c in schema.node_types)
            self.gat.append(gat)
            self.dense.append(Linear(flat_in, n * gat.out_dim, rng))
            dims = {t: gat.out_dim for t in dims}
        self.out_dim = self.gat[-1].out_dim

    def split(self, z: ad.Tensor) -> dict:
        out = {}
        for t, _, c in self.schema.node_types:
            o = self.schema.offsets[t]
            out[t] = ad.take(z, slice(o, o + c))
        return out

    def __call__(self, graph: HeteroGraph) -> ad.Tensor:
        graph.validate(self.schema)
        feats = {t: ad.constant(graph.nodes[t]) for t, _, _ in self.schema.node_types}
        n = self.schema.num_nodes
        z = None
        for gat, dense in zip(self.gat, self.dense):
            flat = ad.concat([ad.flatten(feats[t]) for t, _, _ in self.schema.node_types])
            lin = ad.reshape(dense(flat), (n, gat.out_dim))
            z = ad.relu(gat(feats, graph) + lin)
            feats = self.split(z)
        return z

    def attention_coefficients(self, graph: HeteroGraph) -> list[np.ndarray]:
        """Per-layer alpha arrays (E_total, heads) for inspection."""
        out = []
        with ad.no_grad():
            feats = {t: ad.constant(graph.nodes[t]) for t, _, _ in self.schema.node_types}
            n = self.schema.num_nodes
            for gat, dense in zip(self.gat, self.dense):
                out.append(gat.attention(feats, graph).data)
                flat = ad.concat([ad.flatten(feats[t]) for t, _, _ in self.schema.node_types])
                z = ad.relu(gat(feats, graph) + ad.reshape(dense(flat), (n, gat.out_dim)))
                feats = self.split(z)
        return out
