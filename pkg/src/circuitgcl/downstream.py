"""Encoder-decoder models for graph-level downstream tasks.

The encoder runs two parallel branches over the same graph: a frozen
pretrained encoder of depth ``d_D`` and a trainable edge-updating GIN of depth
``d_p``.  Their node and arc features are concatenated and projected back to
``hidden``, then refined by a trainable series stack of depth ``d_s``.

Task 1 compares three circuits through a head on ``[g_t | g_a | g_b]``.
Tasks 2 and 3 decode per-node ``[node_out | param_row]`` through an MLP,
sum-pool over nodes and regress the target vector.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import graph as cg
from .contrastive import NumericFailure
from .autodiff import ParamSet, Tensor
from .encoders import DiceStack, Encoded, EncoderSpec, GraphEncoder, readout
from .graph import CircuitGraph, GraphBatch
from .layers import MLP, Linear
from .netlist import NonPositiveParam

log = logging.getLogger(__name__)

TASK1_CLASSES = ("first", "second", "equal")
TASK_OUT_DIMS = {1: 3, 2: 2, 3: 5}

# learning rate, batch size, epochs (steps for task 1)
TASK_DEFAULTS = {
    1: {"lr": 1e-5, "batch_size": 50, "epochs": 20000},
    2: {"lr": 1e-4, "batch_size": 2048, "epochs": 300},
    3: {"lr": 1e-4, "batch_size": 1024, "epochs": 300},
}


class MissingCheckpoint(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_D: int = 2
    d_p: int = 0
    d_s: int = 2
    hidden: int = 512
    fusion: str = "concat"
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.d_D, self.d_p, self.d_s) < 0:
            raise ValueError("depths must be >= 0")
        if self.fusion != "concat":
            raise ValueError(f"unknown fusion {self.fusion!r}")


@dataclass(frozen=True)
class DownstreamTrainConfig:
    lr: float = 1e-4
    batch_size: int = 1024
    epochs: int = 300
    seed: int = 0
    decoder_hidden: int = 256
    decoder_dropout: float = 0.3
    decoder_norm: str = "none"


# ---------------------------------------------------------------- parameters

def encode_params(graph) -> np.ndarray:
    """|V| x 9 rows: one-hot(type) * -ln(param) for devices, zeros for nets."""
    if isinstance(graph, GraphBatch):
        types, params = graph.node_types, graph.params
    else:
        types = np.asarray(graph.nodes, dtype=np.int64)
        params = np.array([np.nan if p is None else p for p in graph.params], dtype=np.float64)
    out = np.zeros((len(types), cg.NUM_NODE_TYPES))
    dev = (types >= 3)
    if np.any(dev & ~(params > 0)):
        bad = int(np.flatnonzero(dev & ~(params > 0))[0])
        raise NonPositiveParam(f"node {bad}")
    rows = np.flatnonzero(dev)
    out[rows, types[rows]] = -np.log(params[rows])
    return out


@dataclass
class ParamScaler:
    """Per-device-type standardization of the encoded parameter column.

    ``-ln(param)`` in SI units puts e.g. picofarads near 27.6 with a spread well
    under 1, so the decoder sees z-scores fitted on training graphs instead.
    Net rows stay zero.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, graphs: Sequence[CircuitGraph]) -> "ParamScaler":
        batch = GraphBatch.from_graphs(graphs)
        enc = encode_params(batch)
        mean, std = np.zeros(cg.NUM_NODE_TYPES), np.ones(cg.NUM_NODE_TYPES)
        for t in range(3, cg.NUM_NODE_TYPES):
            vals = enc[batch.node_types == t, t]
            if len(vals):
                mean[t] = vals.mean()
                std[t] = vals.std() if vals.std() > 0 else 1.0
        return cls(mean, std)

    def transform(self, rows: np.ndarray, node_types: np.ndarray) -> np.ndarray:
        out = np.zeros_like(rows)
        dev = np.flatnonzero(node_types >= 3)
        t = node_types[dev]
        out[dev, t] = (rows[dev, t] - self.mean[t]) / self.std[t]
        return out


# ---------------------------------------------------------------- encoder

class DownstreamEncoder:
    def __init__(self, config: EncoderConfig, frozen: Optional[GraphEncoder] = None,
                 seed: int = 0, params: Optional[ParamSet] = None):
        if config.d_D > 0:
            if frozen is None:
                raise MissingCheckpoint("d_D > 0 needs a pretrained encoder checkpoint")
            if frozen.spec.depth != config.d_D:
                raise ValueError(f"d_D={config.d_D} but checkpoint depth is {frozen.spec.depth}")
        self.config = config
        self.frozen = frozen if config.d_D > 0 else None
        rng = np.random.default_rng([seed, 11])
        self.params = ParamSet() if params is None else params
        H = config.hidden
        self.parallel = GraphEncoder(EncoderSpec("dice", config.d_p, H, config.dropout),
                                     seed=rng, prefix="par", params=self.params)
        self.node_fuse = self.edge_fuse = None
        if self.frozen is not None:
            hD = self.frozen.spec.hidden
            self.node_fuse = Linear(self.params, "fuse.node", hD + H, H, rng)
            self.edge_fuse = Linear(self.params, "fuse.edge", hD + H, H, rng)
        self.series = DiceStack(self.params, "ser", H, config.d_s, rng, config.dropout)

    def forward(self, batch: GraphBatch, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> Encoded:
        h, e = self.parallel.project(batch, train, rng)
        h, e = self.parallel.propagate(h, e, batch, train, rng)
        if self.frozen is not None:
            fz = self.frozen.forward(batch, train=False)
            hD, eD = ad.stop_gradient(fz.node_out), ad.stop_gradient(fz.edge_out)
            h = self.node_fuse(ad.concat_cols([hD, h]))
            e = self.edge_fuse(ad.concat_cols([eD, e]))
        h, e = self.series(h, e, batch, train, rng)
        return Encoded(h, e, readout(h, e, batch))


def encode_downstream(graph: CircuitGraph, encoder: DownstreamEncoder) -> np.ndarray:
    return encoder.forward(GraphBatch.from_graphs([graph])).g.data[0].copy()


class Decoder:
    def __init__(self, params: ParamSet, enc_hidden: int, out_dim: int, rng,
                 hidden: int = 256, dropout: float = 0.3, norm: str = "none"):
        self.out_dim = out_dim
        self.node_mlp = MLP(params, "dec.node", enc_hidden + cg.NUM_NODE_TYPES, hidden, hidden,
                            rng, dropout, norm)
        self.head = MLP(params, "dec.head", hidden, hidden, out_dim, rng, dropout, norm)

    def __call__(self, node_out: Tensor, param_rows: np.ndarray, batch: GraphBatch,
                 train: bool = False, rng=None) -> Tensor:
        if param_rows.shape != (node_out.shape[0], cg.NUM_NODE_TYPES):
            raise ad.ShapeMismatch("decode", node_out.shape, param_rows.shape)
        x = self.node_mlp(ad.concat_cols([node_out, Tensor(param_rows)]), train, rng)
        return self.head(ad.segment_sum(x, batch.node_graph, batch.num_graphs), train, rng)


def decode(encoded: Encoded, param_rows: np.ndarray, decoder: Decoder,
           batch: GraphBatch) -> np.ndarray:
    return decoder(encoded.node_out, param_rows, batch).data


# ---------------------------------------------------------------- metrics

def r2_score(y_true, y_pred) -> np.ndarray:
    """Per-column coefficient of determination 1 - SS_res / SS_tot."""
    y = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if y.ndim == 1:
        y, p = y[:, None], p[:, None]
    ss_res = ((y - p) ** 2).sum(axis=0)
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------- task 1

def task1_truth(t: frozenset, a: frozenset, b: frozenset) -> int:
    """0 = first more similar, 1 = second, 2 = equal (by shared label count)."""
    sa, sb = len(t & a), len(t & b)
    return 0 if sa > sb else 1 if sb > sa else 2


class SimilarityHead:
    def __init__(self, params: ParamSet, hidden: int, rng, width: int = 256,
                 dropout: float = 0.0):
        self.mlp = MLP(params, "task1.head", 3 * hidden, width, 3, rng, dropout)

    def __call__(self, gt: Tensor, ga: Tensor, gb: Tensor, train=False, rng=None) -> Tensor:
        return self.mlp(ad.concat_cols([gt, ga, gb]), train, rng)


def task1_logits(g_t, g_a, g_b, head: SimilarityHead, labels=None):
    """(3-class probabilities, true class or None) for one comparison triple."""
    rows = [Tensor(np.asarray(x, dtype=np.float64).reshape(1, -1)) for x in (g_t, g_a, g_b)]
    probs = ad.softmax_rows(head(*rows)).data[0]
    truth = task1_truth(*labels) if labels is not None else None
    return probs, truth


def _triples(targets: Sequence[int], pool: Sequence[int], labels: Sequence[frozenset]):
    out = []
    for t in targets:
        others = [i for i in pool if i != t]
        for a, b in itertools.permutations(others, 2):
            out.append((t, a, b, task1_truth(labels[t], labels[a], labels[b])))
    return np.asarray(out, dtype=np.int64).reshape(-1, 4)


def _cross_entropy(logits: Tensor, classes: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[1])[classes]
    return ad.scalar_mul(ad.mean(ad.row_sum(ad.mul(ad.log_softmax_rows(logits),
                                                     Tensor(onehot)))), -1.0)


def train_task1(graphs: Sequence[CircuitGraph], labels: Sequence[frozenset],
                test_names: Sequence[str], config: EncoderConfig,
                train_cfg: DownstreamTrainConfig, frozen: Optional[GraphEncoder] = None
                ) -> dict:
    """Similarity-comparison training; ``epochs`` counts optimizer steps."""
    names = [g.name for g in graphs]
    test = [names.index(n) for n in test_names]
    train = [i for i in range(len(graphs)) if i not in test]
    if len(train) < 3:
        raise ValueError("task 1 needs at least 3 training circuits")
    rng = np.random.default_rng([train_cfg.seed, 21])
    enc = DownstreamEncoder(config, frozen, seed=train_cfg.seed)
    head = SimilarityHead(enc.params, config.hidden, np.random.default_rng([train_cfg.seed, 22]),
                          width=train_cfg.decoder_hidden, dropout=train_cfg.decoder_dropout)
    opt = ad.Adam(list(enc.params.values()), lr=train_cfg.lr)
    batch = GraphBatch.from_graphs(graphs)
    per_target = {t: _triples([t], train, labels) for t in train}

    def logits_for(tri, train_mode):
        g = enc.forward(batch, train=train_mode, rng=rng).g
        return head(ad.gather_rows(g, tri[:, 0]), ad.gather_rows(g, tri[:, 1]),
                    ad.gather_rows(g, tri[:, 2]), train_mode, rng)

    losses = []
    for _ in range(train_cfg.epochs):
        tri = per_target[train[int(rng.integers(len(train)))]]
        opt.zero_grad()
        loss = _cross_entropy(logits_for(tri, True), tri[:, 3])
        if not math.isfinite(loss.item()):
            raise NumericFailure("non-finite task-1 loss")
        loss.backward()
        opt.step()
        losses.append(loss.item())

    def accuracy(targets):
        tri = _triples(targets, range(len(graphs)), labels)
        pred = logits_for(tri, False).data.argmax(axis=1)
        return float((pred == tri[:, 3]).mean()), len(tri)

    test_acc, n_test = accuracy(test) if test else (float("nan"), 0)
    train_acc, _ = accuracy(train)
    return {"accuracy": test_acc, "train_accuracy": train_acc, "test_triples": n_test,
            "final_loss": float(np.mean(losses[-20:])) if losses else float("nan"),
            "trainable_params": enc.params.count()}


# ---------------------------------------------------------------- tasks 2 / 3

@dataclass
class RegressionData:
    graphs: list[CircuitGraph]
    targets: np.ndarray
    circuit_ids: list[str]
    target_names: list[str] = field(default_factory=list)


def _with_params(g: CircuitGraph, updates: Mapping[int, float]) -> CircuitGraph:
    params = list(g.params)
    for node, value in updates.items():
        if not cg.is_device(g.nodes[node]):
            raise ValueError(f"param mapped to non-device node {node}")
        if not value > 0:
            raise NonPositiveParam(f"node {node}")
        params[node] = float(value)
    return CircuitGraph(g.nodes, g.arcs, tuple(params), g.name, g.origin)


def load_regression_csv(csv_path, sidecar_path=None) -> RegressionData:
    """Rows ``circuit_id, param_1..param_k, target_1..target_m`` plus a sidecar
    JSON mapping each circuit's param columns to device nodes."""
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    side = json.loads(sidecar_path.read_text())
    base = sidecar_path.parent
    circuits = {}
    for cid, spec in side["circuits"].items():
        g = cg.from_json((base / spec["graph"]).read_text())
        circuits[cid] = (g, {col: int(node) for col, node in spec["params"].items()})
    graphs, targets, ids = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        tcols = [c for c in reader.fieldnames if c.startswith("target_")]
        for row in reader:
            cid = row["circuit_id"]
            if cid not in circuits:
                raise KeyError(f"circuit {cid!r} missing from sidecar")
            g, mapping = circuits[cid]
            updates = {node: float(row[col]) for col, node in mapping.items()
                       if row.get(col) not in (None, "")}
            graphs.append(_with_params(g, updates))
            targets.append([float(row[c]) for c in tcols])
            ids.append(cid)
    return RegressionData(graphs, np.asarray(targets, dtype=np.float64), ids,
                          side.get("targets", tcols))


def split_811(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 31]).permutation(n)
    a, b = int(round(0.8 * n)), int(round(0.9 * n))
    return perm[:a], perm[a:b], perm[b:]


class RegressionModel:
    def __init__(self, config: EncoderConfig, out_dim: int, train_cfg: DownstreamTrainConfig,
                 frozen: Optional[GraphEncoder] = None):
        self.encoder = DownstreamEncoder(config, frozen, seed=train_cfg.seed)
        self.decoder = Decoder(self.encoder.params, config.hidden, out_dim,
                               np.random.default_rng([train_cfg.seed, 41]),
                               train_cfg.decoder_hidden, train_cfg.decoder_dropout,
                               train_cfg.decoder_norm)
        self.params = self.encoder.params
        self.scaler: Optional[ParamScaler] = None

    def __call__(self, batch: GraphBatch, train=False, rng=None) -> Tensor:
        enc = self.encoder.forward(batch, train, rng)
        rows = encode_params(batch)
        if self.scaler is not None:
            rows = self.scaler.transform(rows, batch.node_types)
        return self.decoder(enc.node_out, rows, batch, train, rng)

    def predict(self, graphs: Sequence[CircuitGraph], chunk: int = 1024) -> np.ndarray:
        return np.concatenate([self(GraphBatch.from_graphs(graphs[i:i + chunk])).data
                               for i in range(0, len(graphs), chunk)], axis=0)


def train_regression(data: RegressionData, config: EncoderConfig,
                     train_cfg: DownstreamTrainConfig, frozen: Optional[GraphEncoder] = None,
                     out_dim: Optional[int] = None) -> dict:
    """MSE training on z-scored targets; model selected on validation mean R^2."""
    Y = data.targets
    out_dim = out_dim or Y.shape[1]
    if Y.shape[1] != out_dim:
        raise ad.ShapeMismatch("targets", Y.shape, (len(Y), out_dim))
    tr, va, te = split_811(len(Y), train_cfg.seed)
    mu, sd = Y[tr].mean(axis=0), Y[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Yz = (Y - mu) / sd

    model = RegressionModel(config, out_dim, train_cfg, frozen)
    model.scaler = ParamScaler.fit([data.graphs[i] for i in tr])
    opt = ad.Adam(list(model.params.values()), lr=train_cfg.lr)
    rng = np.random.default_rng([train_cfg.seed, 42])
    graphs = data.graphs
    batches = {}

    def batch_of(idx):
        key = idx.tobytes()
        if key not in batches:
            batches[key] = GraphBatch.from_graphs([graphs[i] for i in idx])
        return batches[key]

    def predict(idx):
        return model(batch_of(np.sort(idx))).data * sd + mu, Y[np.sort(idx)]

    best = (-np.inf, None, 0)
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(tr)
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            batch = GraphBatch.from_graphs([graphs[i] for i in idx])
            opt.zero_grad()
            err = ad.sub(model(batch, True, rng), Tensor(Yz[idx]))
            loss = ad.mean(ad.mul(err, err))
            if not math.isfinite(loss.item()):
                raise NumericFailure("non-finite regression loss")
            loss.backward()
            opt.step()
        pv, yv = predict(va)
        val_r2 = float(np.mean(r2_score(yv, pv)))
        history.append(val_r2)
        if val_r2 > best[0]:
            best = (val_r2, {k: t.data.copy() for k, t in model.params.items()}, epoch)

    for k, arr in best[1].items():
        model.params[k].data = arr
    pt, yt = predict(te)
    r2 = r2_score(yt, pt)
    names = data.target_names or [f"target_{i + 1}" for i in range(out_dim)]
    return {"r2": {n: float(v) for n, v in zip(names, r2)}, "r2_mean": float(np.mean(r2)),
            "best_epoch": best[2], "val_r2": float(best[0]),
            "trainable_params": model.params.count(),
            "split": [int(len(tr)), int(len(va)), int(len(te))]}


def train_task(task: int, data, config: EncoderConfig, train_cfg: DownstreamTrainConfig,
               frozen: Optional[GraphEncoder] = None) -> dict:
    if task == 1:
        graphs, labels, test_names = data
        return train_task1(graphs, labels, test_names, config, train_cfg, frozen)
    if task in (2, 3):
        return train_regression(data, config, train_cfg, frozen, TASK_OUT_DIMS[task])
    raise ValueError(f"unknown task {task}")


# ---------------------------------------------------------------- synthetic data

def rc_ladder_netlist(stages: int) -> str:
    lines = [f"* rc ladder, {stages} stages", "Vin in 0 0"]
    prev = "in"
    for k in range(1, stages + 1):
        node = "out" if k == stages else f"n{k}"
        lines += [f"R{k} {prev} {node} 1k", f"C{k} {node} 0 1p"]
        prev = node
    return "\n".join(lines) + "\n"


def elmore_delays(r: Sequence[float], c: Sequence[float]) -> tuple[float, float]:
    """(Elmore delay at the ladder output, sum of local RC constants), in ns."""
    elmore = sum(ci * sum(r[:i + 1]) for i, ci in enumerate(c))
    local = sum(ri * ci for ri, ci in zip(r, c))
    return elmore * 1e9, local * 1e9


def make_rc_delay_dataset(out_dir, n_rows: int = 500, seed: int = 0,
                          stage_counts: Sequence[int] = (1, 2, 3, 4, 5)) -> Path:
    """Write a Task-2-style CSV + sidecar whose targets follow closed-form RC delays."""
    from .netlist import parse_netlist

    out = Path(out_dir)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    kmax = 2 * max(stage_counts)
    sidecar = {"targets": ["rise_delay", "fall_delay"], "circuits": {}}
    layouts = {}
    for n in stage_counts:
        cid = f"rc{n}"
        g = cg.build_graph(parse_netlist(rc_ladder_netlist(n), name=cid))
        (out / "graphs" / f"{cid}.json").write_text(cg.to_json(g))
        # device nodes come in card order R1, C1, R2, C2, ...
        devs = g.device_nodes()
        sidecar["circuits"][cid] = {"graph": f"graphs/{cid}.json",
                                    "params": {f"param_{i + 1}": d for i, d in enumerate(devs)}}
        layouts[cid] = n
    with open(out / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["circuit_id"] + [f"param_{i + 1}" for i in range(kmax)] +
                   ["target_1", "target_2"])
        ids = list(layouts)
        for _ in range(n_rows):
            cid = ids[int(rng.integers(len(ids)))]
            n = layouts[cid]
            r = np.exp(rng.uniform(np.log(1e3), np.log(3e3), n))
            c = np.exp(rng.uniform(np.log(0.5e-12), np.log(1.5e-12), n))
            vals = [x for pair in zip(r, c) for x in pair]
            rise, fall = elmore_delays(r, c)
            w.writerow([cid] + [repr(float(v)) for v in vals] + [""] * (kmax - len(vals)) +
                       [repr(float(rise)), repr(float(fall))])
    (out / "data.json").write_text(json.dumps(sidecar, indent=1))
    return out / "data.csv"


def write_embeddings_csv(path, sample_ids, origin_ids, polarities, Z: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "origin_id", "polarity"] +
                   [f"dim_{i}" for i in range(Z.shape[1])])
        for sid, oid, pol, row in zip(sample_ids, origin_ids, polarities, Z):
            w.writerow([sid, oid, pol] + [repr(float(x)) for x in row])


def metrics_json(task: int, config: dict, seed: int, metrics: dict) -> str:
    return json.dumps({"task": task, "config": config, "seed": seed, "metrics": metrics},
                      indent=1, sort_keys=True)
