"""Positive / negative graph augmentation and the sample relation index.

Positive steps clone a random device in parallel or in series.  Negative
steps swap one device subgraph for a functionally different one:

    capacitor -> inductor          inductor -> capacitor
    resistor  -> capacitor | inductor (coin flip)
    current source -> resistor
    NMOS -> NMOS + PMOS in series (drain side) + PMOS across both
    PMOS -> mirror image with NMOS
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import graph as cg
from .graph import CircuitGraph

MANIFEST_VERSION = 1


class AugmentError(ValueError):
    pass


class NoDeviceNodes(AugmentError):
    pass


class EmptyCorpus(AugmentError):
    pass


class AugKind(str, enum.Enum):
    POS_PARALLEL = "PosParallel"
    POS_SERIES = "PosSeries"
    NEG_REPLACE = "NegReplace"

    @property
    def positive(self) -> bool:
        return self is not AugKind.NEG_REPLACE


class Polarity(str, enum.Enum):
    ORIGINAL = "Original"
    POSITIVE = "Positive"
    NEGATIVE = "Negative"


class Relation(str, enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    NONEQUAL = "NonEqual"


@dataclass(frozen=True)
class AugStep:
    kind: AugKind
    target: int
    detail: str

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "target": self.target, "detail": self.detail}

    @classmethod
    def from_dict(cls, d: dict) -> "AugStep":
        return cls(AugKind(d["kind"]), int(d["target"]), str(d["detail"]))


@dataclass(frozen=True)
class AugmentedSample:
    sample_id: str
    graph: CircuitGraph
    origin_id: str
    chain: tuple[AugStep, ...] = ()
    polarity: Polarity = field(default=Polarity.ORIGINAL)

    def __post_init__(self):
        neg = any(not s.kind.positive for s in self.chain)
        expected = (Polarity.NEGATIVE if neg else
                    Polarity.POSITIVE if self.chain else Polarity.ORIGINAL)
        if self.polarity is not expected:
            raise AugmentError(f"{self.sample_id}: polarity {self.polarity} "
                               f"inconsistent with chain")


# ---------------------------------------------------------------- edit helpers

class _Editor:
    def __init__(self, g: CircuitGraph):
        self.g = g
        self.nodes = list(g.nodes)
        self.params = list(g.params)
        self.arcs = list(g.arcs)

    def add_node(self, code: int, param: Optional[float]) -> int:
        self.nodes.append(code)
        self.params.append(param)
        return len(self.nodes) - 1

    def flow(self, u: int, v: int):
        self.arcs += [(u, v, cg.FLOW), (v, u, cg.FLOW)]

    def reroute(self, dev: int, old_net: int, new_net: int):
        """Move the flow connection dev<->old_net onto new_net (in place)."""
        for pair in ((dev, old_net), (old_net, dev)):
            i = self.arcs.index((pair[0], pair[1], cg.FLOW))
            s, d, t = self.arcs[i]
            self.arcs[i] = (new_net if s == old_net else s, new_net if d == old_net else d, t)

    def control(self, gate: int, bulk: int, dev: int, code: int):
        g_t, b_t = cg.MOS_ARC_TYPES[code]
        self.arcs += [(gate, dev, g_t), (bulk, dev, b_t)]

    def build(self) -> CircuitGraph:
        return CircuitGraph(tuple(self.nodes), tuple(self.arcs), tuple(self.params),
                            self.g.name, self.g.origin)


def _pick_device(g: CircuitGraph, rng: np.random.Generator, target: Optional[int]) -> int:
    devices = g.device_nodes()
    if not devices:
        raise NoDeviceNodes(f"{g.name or '<graph>'} has no device nodes")
    if target is None:
        return devices[int(rng.integers(len(devices)))]
    if target not in devices:
        raise AugmentError(f"node {target} is not a device node")
    return target


# ---------------------------------------------------------------- positive

def positive_step(g: CircuitGraph, rng: np.random.Generator, mode: Optional[str] = None,
                  target: Optional[int] = None) -> tuple[CircuitGraph, AugStep]:
    tgt = _pick_device(g, rng, target)
    if mode is None:
        mode = "parallel" if rng.random() < 0.5 else "series"
    code, p = g.nodes[tgt], g.params[tgt]
    ed = _Editor(g)

    if mode == "parallel":
        clone = ed.add_node(code, p)
        for s, d, t in g.arcs:
            if s == tgt:
                ed.arcs.append((clone, d, t))
            elif d == tgt:
                ed.arcs.append((s, clone, t))
        return ed.build(), AugStep(AugKind.POS_PARALLEL, tgt, "parallel")

    if mode != "series":
        raise ValueError(f"unknown positive mode {mode!r}")
    nbrs = g.flow_neighbors(tgt)
    # MOS clones go on the drain side (first flow connection)
    side = nbrs[0] if cg.is_mos(code) else nbrs[int(rng.integers(2))]
    mid = ed.add_node(cg.OTHER_NET, None)
    clone = ed.add_node(code, p)
    ed.reroute(tgt, side, mid)
    ed.flow(mid, clone)
    ed.flow(side, clone)
    if cg.is_mos(code):
        gate, bulk = g.control_sources(tgt)
        ed.control(gate, bulk, clone, code)
    return ed.build(), AugStep(AugKind.POS_SERIES, tgt, "series")


def augment_positive(g: CircuitGraph, rng: np.random.Generator, mode: Optional[str] = None,
                     target: Optional[int] = None) -> CircuitGraph:
    return positive_step(g, rng, mode, target)[0]


# ---------------------------------------------------------------- negative

_PASSIVE_SWAP = {
    cg.CAPACITOR: (cg.INDUCTOR, "cap->ind"),
    cg.INDUCTOR: (cg.CAPACITOR, "ind->cap"),
    cg.CURRENT_SOURCE: (cg.RESISTOR, "isrc->res"),
}
_COUNTERPART = {cg.NMOS: cg.PMOS, cg.PMOS: cg.NMOS}


def negative_step(g: CircuitGraph, rng: np.random.Generator,
                  target: Optional[int] = None) -> tuple[CircuitGraph, AugStep]:
    tgt = _pick_device(g, rng, target)
    code, p = g.nodes[tgt], g.params[tgt]
    ed = _Editor(g)

    if code == cg.RESISTOR:
        new_code, detail = ((cg.CAPACITOR, "res->cap") if rng.random() < 0.5
                            else (cg.INDUCTOR, "res->ind"))
        ed.nodes[tgt] = new_code
    elif code in _PASSIVE_SWAP:
        new_code, detail = _PASSIVE_SWAP[code]
        ed.nodes[tgt] = new_code
    else:
        other = _COUNTERPART[code]
        drain, source = g.flow_neighbors(tgt)
        gate, bulk = g.control_sources(tgt)
        mid = ed.add_node(cg.OTHER_NET, None)
        series = ed.add_node(other, p)
        shunt = ed.add_node(other, p)
        ed.reroute(tgt, drain, mid)
        ed.flow(drain, series)
        ed.flow(mid, series)
        ed.control(gate, bulk, series, other)
        ed.flow(drain, shunt)
        ed.flow(source, shunt)
        ed.control(gate, bulk, shunt, other)
        detail = f"{cg.NODE_TYPE_NAMES[code]}->{cg.NODE_TYPE_NAMES[other]}-par-ser"
    return ed.build(), AugStep(AugKind.NEG_REPLACE, tgt, detail)


def augment_negative(g: CircuitGraph, rng: np.random.Generator,
                     target: Optional[int] = None) -> CircuitGraph:
    return negative_step(g, rng, target)[0]


# ---------------------------------------------------------------- relations

class RelationIndex:
    """Pair relations derived from each sample's origin and polarity."""

    def __init__(self, sample_ids: Sequence[str], origins: Sequence[str],
                 polarities: Sequence[Polarity]):
        if not (len(sample_ids) == len(origins) == len(polarities)):
            raise ValueError("length mismatch")
        self.sample_ids = list(sample_ids)
        self.origins = list(origins)
        self.polarities = [Polarity(p) for p in polarities]
        self.origin_names = list(dict.fromkeys(self.origins))
        code = {o: i for i, o in enumerate(self.origin_names)}
        self.origin_code = np.array([code[o] for o in self.origins], dtype=np.int64)
        self.is_negative = np.array([p is Polarity.NEGATIVE for p in self.polarities])

    @classmethod
    def from_samples(cls, samples: Sequence[AugmentedSample]) -> "RelationIndex":
        return cls([s.sample_id for s in samples], [s.origin_id for s in samples],
                   [s.polarity for s in samples])

    def __len__(self):
        return len(self.sample_ids)

    def relation(self, i: int, j: int) -> Relation:
        if i == j:
            raise ValueError("a sample is not paired with itself")
        if self.origin_code[i] != self.origin_code[j]:
            return Relation.NONEQUAL
        if self.is_negative[i] or self.is_negative[j]:
            return Relation.NEGATIVE
        return Relation.POSITIVE

    def masks(self, idx: Optional[Sequence[int]] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(positive, non-equal, negative) 0/1 matrices over the selected samples."""
        idx = np.arange(len(self)) if idx is None else np.asarray(idx, dtype=np.int64)
        o = self.origin_code[idx]
        neg = self.is_negative[idx]
        same = o[:, None] == o[None, :]
        off = ~np.eye(len(idx), dtype=bool)
        pos = same & ~neg[:, None] & ~neg[None, :] & off
        negative = same & off & ~pos
        return pos.astype(np.float64), (~same).astype(np.float64), negative.astype(np.float64)

    def positives(self, i: int) -> list[int]:
        return [j for j in range(len(self)) if j != i and self.relation(i, j) is Relation.POSITIVE]

    def nonequal(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.origin_code != self.origin_code[i])]

    def negatives(self, i: int) -> list[int]:
        return [j for j in range(len(self)) if j != i and self.relation(i, j) is Relation.NEGATIVE]

    def n_pos(self, i: int) -> int:
        return len(self.positives(i))

    def to_dict(self) -> dict:
        return {
            "origins": self.origin_names,
            "samples": [[s, int(o), p.value] for s, o, p in
                        zip(self.sample_ids, self.origin_code, self.polarities)],
        }


# ---------------------------------------------------------------- dataset

def _extend(base: AugmentedSample, length: int, rng: np.random.Generator) -> tuple:
    g, chain = base.graph, list(base.chain)
    while len(chain) < length:
        g, step = positive_step(g, rng)
        chain.append(step)
    return g, chain


def generate_dataset(corpus: Sequence[CircuitGraph], n_pos: int, n_neg: int,
                     max_chain: int = 5, seed: int = 0
                     ) -> tuple[list[AugmentedSample], RelationIndex]:
    """Originals plus ``n_pos`` positive and ``n_neg`` negative views per circuit.

    Each origin draws from its own generator seeded by ``(seed, position)`` so
    the result does not depend on processing order.
    """
    if not corpus:
        raise EmptyCorpus("corpus is empty")
    if n_pos < 0 or n_neg < 0 or max_chain < 1:
        raise ValueError("n_pos, n_neg must be >= 0 and max_chain >= 1")
    names = [g.name or f"c{k}" for k, g in enumerate(corpus)]
    if len(set(names)) != len(names):
        raise ValueError("corpus circuit names must be unique")

    samples: list[AugmentedSample] = []
    for k, (name, g0) in enumerate(zip(names, corpus)):
        rng = np.random.default_rng([seed, k])
        orig = AugmentedSample(f"{name}/orig", g0.with_origin(name), name)
        pos = [orig]
        for i in range(n_pos):
            length = int(rng.integers(1, max_chain + 1))
            bases = [s for s in pos if len(s.chain) < length]
            base = bases[int(rng.integers(len(bases)))]
            g, chain = _extend(base, length, rng)
            pos.append(AugmentedSample(f"{name}/p{i:05d}", g, name, tuple(chain),
                                       Polarity.POSITIVE))
        negs = []
        for i in range(n_neg):
            prefix = int(rng.integers(0, max_chain))
            bases = [s for s in pos if len(s.chain) <= prefix]
            base = bases[int(rng.integers(len(bases)))]
            g, chain = _extend(base, prefix, rng)
            g, step = negative_step(g, rng)
            negs.append(AugmentedSample(f"{name}/n{i:05d}", g, name, tuple(chain + [step]),
                                        Polarity.NEGATIVE))
        samples += pos + negs
    return samples, RelationIndex.from_samples(samples)


def _graph_file(sample_id: str) -> str:
    return "graphs/" + sample_id.replace("/", "__") + ".json"


def save_dataset(directory, samples: Sequence[AugmentedSample], relations: RelationIndex,
                 meta: Optional[dict] = None):
    root = Path(directory)
    (root / "graphs").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        rel = _graph_file(s.sample_id)
        (root / rel).write_text(cg.to_json(s.graph))
        records.append({"id": s.sample_id, "origin_id": s.origin_id,
                        "polarity": s.polarity.value,
                        "chain": [st.to_dict() for st in s.chain], "graph_file": rel})
    manifest = {"version": MANIFEST_VERSION, "meta": meta or {}, "samples": records}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (root / "relations.json").write_text(json.dumps(relations.to_dict()))


def load_dataset(directory) -> tuple[list[AugmentedSample], RelationIndex]:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{root}: unsupported manifest version")
    samples = []
    for r in manifest["samples"]:
        g = cg.from_json((root / r["graph_file"]).read_text())
        samples.append(AugmentedSample(r["id"], g, r["origin_id"],
                                       tuple(AugStep.from_dict(c) for c in r["chain"]),
                                       Polarity(r["polarity"])))
    return samples, RelationIndex.from_samples(samples)
