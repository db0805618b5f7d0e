"""Graph encoders: the edge-updating GIN variant ("dice") plus GCN, GraphSAGE, GAT, GIN.

All five share the same input projection (two MLPs lifting the 9-dim node and
5-dim edge one-hots to ``hidden``) and the same readout: the graph vector is
the sum of every final node row and every final arc row.  Messages flow along
arcs, so ``N(v)`` is the set of in-neighbours of ``v``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .graph import NUM_EDGE_TYPES, NUM_NODE_TYPES, CircuitGraph, FeatureInit, GraphBatch
from .layers import MLP

ARCHS = ("dice", "gcn", "sage", "gat", "gin")
MESSAGE_SOURCES = ("receiver", "sender")


class DepthParamsMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    arch: str = "dice"
    depth: int = 2
    hidden: int = 256
    dropout: float = 0.2
    norm: str = "layer"
    message_source: str = "receiver"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.depth < 0 or self.hidden < 1:
            raise ValueError("depth must be >= 0 and hidden >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.message_source not in MESSAGE_SOURCES:
            raise ValueError(f"unknown message_source {self.message_source!r}")


@dataclass
class Encoded:
    node_out: Tensor   # |V| x hidden
    edge_out: Tensor   # |E| x hidden
    g: Tensor          # num_graphs x hidden


@dataclass
class GraphEmbedding:
    g: np.ndarray
    node_out: np.ndarray
    edge_out: np.ndarray


def _inv_counts(counts: np.ndarray) -> np.ndarray:
    return (1.0 / np.maximum(counts, 1)).reshape(-1, 1)


def readout(node_out: Tensor, edge_out: Tensor, batch: GraphBatch) -> Tensor:
    return ad.add(ad.segment_sum(node_out, batch.node_graph, batch.num_graphs),
                  ad.segment_sum(edge_out, batch.edge_graph, batch.num_graphs))


class DiceStack:
    """``depth`` edge-updating GIN layers operating on hidden-dim node/arc features."""

    def __init__(self, params: ParamSet, prefix: str, hidden: int, depth: int,
                 rng: np.random.Generator, dropout: float = 0.0, norm: str = "layer",
                 message_source: str = "receiver"):
        self.message_source = message_source
        self.layers = []
        for k in range(depth):
            self.layers.append((
                params.add(f"{prefix}.{k}.phi_h", np.zeros((1, 1))),
                params.add(f"{prefix}.{k}.phi_e", np.zeros((1, 1))),
                MLP(params, f"{prefix}.{k}.node_mlp", hidden, hidden, hidden, rng, dropout, norm),
                MLP(params, f"{prefix}.{k}.edge_mlp", hidden, hidden, hidden, rng, dropout, norm),
            ))

    def __call__(self, h: Tensor, e: Tensor, batch: GraphBatch, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
        n = batch.num_nodes
        for phi_h, phi_e, node_mlp, edge_mlp in self.layers:
            if self.message_source == "receiver":
                # sum_u h_v * e_{u->v} == h_v * sum_u e_{u->v}
                m = ad.mul(h, ad.segment_sum(e, batch.dst, n))
            else:
                m = ad.segment_sum(ad.mul(ad.gather_rows(h, batch.src), e), batch.dst, n)
            h_new = node_mlp(ad.add(ad.add(h, ad.mul(phi_h, h)), m), train, rng)
            e_in = ad.add(ad.add(e, ad.mul(phi_e, e)),
                          ad.sub(ad.gather_rows(m, batch.src), ad.gather_rows(m, batch.dst)))
            e = edge_mlp(e_in, train, rng)
            h = h_new
        return h, e


class GraphEncoder:
    def __init__(self, spec: EncoderSpec, seed: Union[int, np.random.Generator] = 0,
                 prefix: str = "enc", params: Optional[ParamSet] = None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.spec = spec
        self.prefix = prefix
        self.params = ParamSet() if params is None else params
        H, p, nk = spec.hidden, spec.dropout, spec.norm
        self.node_in = MLP(self.params, f"{prefix}.node_in", NUM_NODE_TYPES, H, H, rng, p, nk)
        self.edge_in = MLP(self.params, f"{prefix}.edge_in", NUM_EDGE_TYPES, H, H, rng, p, nk)
        self.stack = None
        self.mlps = []
        self.eps = []
        if spec.arch == "dice":
            self.stack = DiceStack(self.params, f"{prefix}.dice", H, spec.depth, rng, p, nk,
                                   spec.message_source)
        for k in range(spec.depth):
            if spec.arch in ("gcn", "gin"):
                self.mlps.append(MLP(self.params, f"{prefix}.{spec.arch}.{k}", H, H, H, rng, p, nk))
            elif spec.arch == "sage":
                self.mlps.append(MLP(self.params, f"{prefix}.sage.{k}", 2 * H, H, H, rng, p, nk))
            if spec.arch == "gin":
                self.eps.append(self.params.add(f"{prefix}.gin.{k}.eps", np.zeros((1, 1))))

    def project(self, batch: GraphBatch, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
        h = self.node_in(Tensor(batch.node_x), train, rng)
        e = self.edge_in(Tensor(batch.edge_x), train, rng)
        return h, e

    def propagate(self, h: Tensor, e: Tensor, batch: GraphBatch, train: bool = False,
                  rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
        arch, n = self.spec.arch, batch.num_nodes
        if arch == "dice":
            return self.stack(h, e, batch, train, rng)
        indeg = np.bincount(batch.dst, minlength=n).astype(np.float64)
        for k in range(self.spec.depth):
            if arch == "gcn":
                d = np.maximum(indeg, 1.0)
                coef = (1.0 / np.sqrt(d[batch.dst] * d[batch.src])).reshape(-1, 1)
                msg = ad.mul(ad.gather_rows(h, batch.src), Tensor(coef))
                h = self.mlps[k](ad.segment_sum(msg, batch.dst, n), train, rng)
            elif arch == "sage":
                m = ad.mul(ad.segment_sum(ad.gather_rows(h, batch.src), batch.dst, n),
                           Tensor(_inv_counts(indeg)))
                h = self.mlps[k](ad.concat_cols([h, m]), train, rng)
            elif arch == "gat":
                h = h + _gat_messages(h, batch)
            elif arch == "gin":
                m = ad.segment_sum(ad.gather_rows(h, batch.src), batch.dst, n)
                h = self.mlps[k](ad.add(ad.add(h, ad.mul(self.eps[k], h)), m), train, rng)
        return h, e

    def forward(self, batch: GraphBatch, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Encoded:
        h, e = self.project(batch, train, rng)
        h, e = self.propagate(h, e, batch, train, rng)
        return Encoded(h, e, readout(h, e, batch))

    def embed(self, graphs: Sequence[CircuitGraph], chunk: int = 512) -> np.ndarray:
        """Eval-mode graph vectors, one row per graph."""
        out = [self.forward(GraphBatch.from_graphs(graphs[i:i + chunk])).g.data
               for i in range(0, len(graphs), chunk)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.spec.hidden))


def gat_attention(h: Tensor, batch: GraphBatch) -> Tensor:
    """Per-arc attention weights: softmax over each node's in-arcs of h_u . h_v."""
    n = batch.num_nodes
    logits = ad.row_sum(ad.mul(ad.gather_rows(h, batch.src), ad.gather_rows(h, batch.dst)))
    # constant per-receiver shift for numerical range; softmax is shift invariant
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, batch.dst, logits.data[:, 0])
    ex = ad.exp(ad.sub(logits, Tensor(shift[batch.dst].reshape(-1, 1))))
    denom = ad.segment_sum(ex, batch.dst, n)
    return ad.div(ex, ad.gather_rows(denom, batch.dst))


def _gat_messages(h: Tensor, batch: GraphBatch) -> Tensor:
    alpha = gat_attention(h, batch)
    return ad.segment_sum(ad.mul(alpha, ad.gather_rows(h, batch.src)), batch.dst, batch.num_nodes)


def _single(graph: CircuitGraph, features: Optional[FeatureInit]) -> GraphBatch:
    batch = GraphBatch.from_graphs([graph])
    if features is not None:
        if features.node_onehots.shape != batch.node_x.shape or \
                features.edge_onehots.shape != batch.edge_x.shape:
            raise ad.ShapeMismatch("features", features.node_onehots.shape, batch.node_x.shape)
        batch.node_x = np.asarray(features.node_onehots, dtype=np.float64)
        batch.edge_x = np.asarray(features.edge_onehots, dtype=np.float64)
    return batch


def encode_graph(encoder: GraphEncoder, graph: CircuitGraph,
                 features: Optional[FeatureInit] = None, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> GraphEmbedding:
    enc = encoder.forward(_single(graph, features), train, rng)
    return GraphEmbedding(enc.g.data[0].copy(), enc.node_out.data.copy(), enc.edge_out.data.copy())


def _arch_checked(arch: str):
    def encode(graph, features, encoder: GraphEncoder, train=False, rng=None) -> GraphEmbedding:
        if encoder.spec.arch != arch:
            raise ValueError(f"encoder arch is {encoder.spec.arch!r}, not {arch!r}")
        return encode_graph(encoder, graph, features, train, rng)
    encode.__name__ = f"encode_{arch}"
    return encode


encode_dice = _arch_checked("dice")
encode_gcn = _arch_checked("gcn")
encode_sage = _arch_checked("sage")
encode_gat = _arch_checked("gat")
encode_gin = _arch_checked("gin")


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ad.ZeroVector("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def save_encoder(path, encoder: GraphEncoder, meta: Optional[dict] = None):
    blob = {"encoder_spec": asdict(encoder.spec), "prefix": encoder.prefix}
    blob.update(meta or {})
    ad.save_checkpoint(path, encoder.params, blob)


def load_encoder(path, spec: Optional[EncoderSpec] = None) -> GraphEncoder:
    blob = ad.read_checkpoint(path)
    meta = blob["meta"]
    stored = EncoderSpec(**meta["encoder_spec"])
    if spec is not None and (spec.arch, spec.depth, spec.hidden) != \
            (stored.arch, stored.depth, stored.hidden):
        raise DepthParamsMismatch(f"checkpoint holds {stored}, requested {spec}")
    enc = GraphEncoder(spec or stored, seed=0, prefix=meta.get("prefix", "enc"))
    try:
        enc.params.load_dict(blob["params"])
    except (KeyError, ad.ShapeMismatch) as exc:
        raise DepthParamsMismatch(str(exc)) from None
    return enc
