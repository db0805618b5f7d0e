"""Typed homogeneous circuit graphs built from netlists.

Node type codes::

    0 ground net    1 power net    2 other net
    3 current source  4 NMOS  5 PMOS  6 resistor  7 capacitor  8 inductor

Edge type codes::

    0 current-flow path (undirected, stored as two opposing arcs)
    1 net -> NMOS gate   2 net -> NMOS bulk
    3 net -> PMOS gate   4 net -> PMOS bulk
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .netlist import GROUND, DeviceKind, Netlist

GROUND_NET, POWER_NET, OTHER_NET = 0, 1, 2
CURRENT_SOURCE, NMOS, PMOS, RESISTOR, CAPACITOR, INDUCTOR = 3, 4, 5, 6, 7, 8
NUM_NODE_TYPES = 9
NUM_EDGE_TYPES = 5

FLOW = 0
NMOS_GATE, NMOS_BULK, PMOS_GATE, PMOS_BULK = 1, 2, 3, 4

NODE_TYPE_NAMES = ("ground", "power", "net", "isrc", "nmos", "pmos", "res", "cap", "ind")

KIND_CODE = {
    DeviceKind.CURRENT_SOURCE: CURRENT_SOURCE,
    DeviceKind.NMOS: NMOS,
    DeviceKind.PMOS: PMOS,
    DeviceKind.RESISTOR: RESISTOR,
    DeviceKind.CAPACITOR: CAPACITOR,
    DeviceKind.INDUCTOR: INDUCTOR,
}

# (gate etype, bulk etype) per MOS code
MOS_ARC_TYPES = {NMOS: (NMOS_GATE, NMOS_BULK), PMOS: (PMOS_GATE, PMOS_BULK)}


def is_net(code: int) -> bool:
    return 0 <= code <= 2


def is_device(code: int) -> bool:
    return 3 <= code <= 8


def is_mos(code: int) -> bool:
    return code in (NMOS, PMOS)


class GraphError(ValueError):
    pass


class DisconnectedCircuit(GraphError):
    pass


class FloatingTerminal(GraphError):
    pass


class FloatingTerminalWarning(UserWarning):
    pass


class DegenerateDevice(GraphError):
    pass


class SchemaError(GraphError):
    pass


class InvariantViolation(GraphError):
    pass


Arc = tuple[int, int, int]


@dataclass(frozen=True)
class CircuitGraph:
    nodes: tuple[int, ...]
    arcs: tuple[Arc, ...]
    params: tuple[Optional[float], ...]
    name: str = ""
    origin: str = ""

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_arcs(self) -> int:
        return len(self.arcs)

    def device_nodes(self) -> list[int]:
        return [i for i, c in enumerate(self.nodes) if is_device(c)]

    def flow_neighbors(self, v: int) -> list[int]:
        """Type-0 neighbours of ``v`` in arc order (one entry per connection)."""
        return [d for s, d, t in self.arcs if s == v and t == FLOW]

    def control_sources(self, v: int) -> tuple[int, int]:
        """(gate net, bulk net) feeding MOS node ``v``."""
        gate = bulk = None
        g_t, b_t = MOS_ARC_TYPES[self.nodes[v]]
        for s, d, t in self.arcs:
            if d == v:
                if t == g_t:
                    gate = s
                elif t == b_t:
                    bulk = s
        if gate is None or bulk is None:
            raise InvariantViolation(f"MOS node {v} lacks gate/bulk arcs")
        return gate, bulk

    def type_counts(self) -> np.ndarray:
        return np.bincount(np.asarray(self.nodes, dtype=np.int64), minlength=NUM_NODE_TYPES)

    def with_origin(self, origin: str) -> "CircuitGraph":
        return CircuitGraph(self.nodes, self.arcs, self.params, self.name, origin)


def _flow_pair(u: int, v: int) -> list[Arc]:
    return [(u, v, FLOW), (v, u, FLOW)]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def weakly_connected(num_nodes: int, arcs: Sequence[Arc]) -> bool:
    if num_nodes == 0:
        return True
    uf = _UnionFind(num_nodes)
    for s, d, _ in arcs:
        uf.union(s, d)
    root = uf.find(0)
    return all(uf.find(i) == root for i in range(num_nodes))


def build_graph(netlist: Netlist, strict: bool = False) -> CircuitGraph:
    """Netlist -> CircuitGraph.  ``strict`` turns floating-net warnings into errors."""
    power = set()
    for d in netlist.devices:
        if d.kind is DeviceKind.VOLTAGE_SUPPLY:
            plus = d.net("plus")
            if plus == GROUND:
                raise DegenerateDevice(f"{d.name}: supply shorted to ground")
            if d.param > 0:
                power.add(plus)

    net_index = {n: i for i, n in enumerate(netlist.nets)}
    nodes = [GROUND_NET if n == GROUND else POWER_NET if n in power else OTHER_NET
             for n in netlist.nets]
    params: list[Optional[float]] = [None] * len(nodes)
    arcs: list[Arc] = []
    uses = {n: 0 for n in netlist.nets}

    for d in netlist.devices:
        for n in d.nets:
            uses[n] += 1
        if d.kind is DeviceKind.VOLTAGE_SUPPLY:
            continue
        code = KIND_CODE[d.kind]
        v = len(nodes)
        nodes.append(code)
        params.append(float(d.param))
        if d.kind.is_mos:
            drain, source = net_index[d.net("drain")], net_index[d.net("source")]
            if drain == source:
                raise DegenerateDevice(f"{d.name}: drain and source on one net")
            g_t, b_t = MOS_ARC_TYPES[code]
            arcs += _flow_pair(drain, v) + _flow_pair(source, v)
            arcs.append((net_index[d.net("gate")], v, g_t))
            arcs.append((net_index[d.net("bulk")], v, b_t))
        else:
            a, b = net_index[d.net("a")], net_index[d.net("b")]
            if a == b:
                raise DegenerateDevice(f"{d.name}: both terminals on one net")
            arcs += _flow_pair(a, v) + _flow_pair(b, v)

    for n, count in uses.items():
        if count == 1 and n != GROUND and n not in power:
            msg = f"{netlist.name or '<netlist>'}: net {n!r} has a single connection"
            if strict:
                raise FloatingTerminal(msg)
            warnings.warn(msg, FloatingTerminalWarning, stacklevel=2)

    if not weakly_connected(len(nodes), arcs):
        raise DisconnectedCircuit(f"{netlist.name or '<netlist>'}: graph is not weakly connected")
    return CircuitGraph(tuple(nodes), tuple(arcs), tuple(params), netlist.name, netlist.name)


def check_invariants(g: CircuitGraph):
    """Raise InvariantViolation if ``g`` breaks any structural rule."""
    n = g.num_nodes
    if len(g.params) != n:
        raise InvariantViolation("params length != node count")
    for i, c in enumerate(g.nodes):
        if not 0 <= c < NUM_NODE_TYPES:
            raise InvariantViolation(f"node {i}: bad type code {c}")
        p = g.params[i]
        if is_device(c):
            if p is None or not p > 0:
                raise InvariantViolation(f"device node {i}: param {p!r}")
        elif p is not None:
            raise InvariantViolation(f"net node {i} carries a param")

    flow_out = [[] for _ in range(n)]
    flow_in = [[] for _ in range(n)]
    ctrl_in = [[] for _ in range(n)]
    for s, d, t in g.arcs:
        if not (0 <= s < n and 0 <= d < n):
            raise InvariantViolation(f"arc {(s, d, t)} out of range")
        if s == d:
            raise InvariantViolation(f"self loop on node {s}")
        if t == FLOW:
            if is_net(g.nodes[s]) == is_net(g.nodes[d]):
                raise InvariantViolation(f"flow arc {(s, d)} does not alternate net/device")
            flow_out[s].append(d)
            flow_in[d].append(s)
        elif 1 <= t <= 4:
            if not is_net(g.nodes[s]):
                raise InvariantViolation(f"control arc {(s, d, t)} from a non-net")
            if g.nodes[d] not in MOS_ARC_TYPES or t not in MOS_ARC_TYPES[g.nodes[d]]:
                raise InvariantViolation(f"control arc {(s, d, t)} into wrong device type")
            ctrl_in[d].append(t)
        else:
            raise InvariantViolation(f"bad edge type {t}")

    for v in range(n):
        if sorted(flow_out[v]) != sorted(flow_in[v]):
            raise InvariantViolation(f"node {v}: flow arcs are not paired")
    for v in g.device_nodes():
        if len(flow_out[v]) != 2:
            raise InvariantViolation(f"device {v}: {len(flow_out[v])} flow connections")
        if flow_out[v][0] == flow_out[v][1]:
            raise InvariantViolation(f"device {v}: both terminals on one net")
        if is_mos(g.nodes[v]):
            if sorted(ctrl_in[v]) != sorted(MOS_ARC_TYPES[g.nodes[v]]):
                raise InvariantViolation(f"MOS {v}: gate/bulk arcs {ctrl_in[v]}")
    if not weakly_connected(n, g.arcs):
        raise InvariantViolation("graph is not weakly connected")


# ---------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureInit:
    node_onehots: np.ndarray
    edge_onehots: np.ndarray


def init_features(g: CircuitGraph) -> FeatureInit:
    nodes = np.asarray(g.nodes, dtype=np.int64)
    etypes = np.asarray([t for _, _, t in g.arcs], dtype=np.int64)
    return FeatureInit(np.eye(NUM_NODE_TYPES)[nodes].reshape(len(nodes), NUM_NODE_TYPES),
                       np.eye(NUM_EDGE_TYPES)[etypes].reshape(len(etypes), NUM_EDGE_TYPES))


@dataclass
class GraphBatch:
    """Disjoint union of several graphs, ready for message passing."""
    node_x: np.ndarray
    edge_x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    num_graphs: int
    node_types: np.ndarray
    params: np.ndarray  # per node, nan for nets

    @property
    def num_nodes(self) -> int:
        return len(self.node_graph)

    @property
    def num_arcs(self) -> int:
        return len(self.edge_graph)

    @classmethod
    def from_graphs(cls, graphs: Sequence[CircuitGraph]) -> "GraphBatch":
        types, src, dst, et, ng, eg, prm = [], [], [], [], [], [], []
        offset = 0
        for k, g in enumerate(graphs):
            types.extend(g.nodes)
            prm.extend(np.nan if p is None else p for p in g.params)
            for s, d, t in g.arcs:
                src.append(s + offset)
                dst.append(d + offset)
                et.append(t)
            ng.extend([k] * g.num_nodes)
            eg.extend([k] * g.num_arcs)
            offset += g.num_nodes
        types = np.asarray(types, dtype=np.int64)
        et = np.asarray(et, dtype=np.int64)
        return cls(
            node_x=np.eye(NUM_NODE_TYPES)[types].reshape(len(types), NUM_NODE_TYPES),
            edge_x=np.eye(NUM_EDGE_TYPES)[et].reshape(len(et), NUM_EDGE_TYPES),
            src=np.asarray(src, dtype=np.int64),
            dst=np.asarray(dst, dtype=np.int64),
            node_graph=np.asarray(ng, dtype=np.int64),
            edge_graph=np.asarray(eg, dtype=np.int64),
            num_graphs=len(graphs),
            node_types=types,
            params=np.asarray(prm, dtype=np.float64),
        )


# ---------------------------------------------------------------- JSON

_JSON_KEYS = {"name", "nodes", "arcs", "params", "origin"}


def to_dict(g: CircuitGraph) -> dict:
    return {
        "name": g.name,
        "nodes": list(g.nodes),
        "arcs": [list(a) for a in g.arcs],
        "params": {str(i): p for i, p in enumerate(g.params) if p is not None},
        "origin": g.origin,
    }


def to_json(g: CircuitGraph) -> str:
    return json.dumps(to_dict(g))


def from_dict(blob: dict) -> CircuitGraph:
    if not isinstance(blob, dict):
        raise SchemaError("graph JSON must be an object")
    unknown = set(blob) - _JSON_KEYS
    if unknown:
        raise SchemaError(f"unknown fields {sorted(unknown)}")
    missing = {"nodes", "arcs"} - set(blob)
    if missing:
        raise SchemaError(f"missing fields {sorted(missing)}")
    nodes = blob["nodes"]
    if not all(isinstance(c, int) and not isinstance(c, bool) and 0 <= c < NUM_NODE_TYPES
               for c in nodes):
        raise SchemaError("node codes must be integers in 0..8")
    n = len(nodes)
    arcs = []
    for a in blob["arcs"]:
        if len(a) != 3 or not all(isinstance(x, int) for x in a):
            raise SchemaError(f"bad arc {a!r}")
        s, d, t = a
        if not 0 <= t < NUM_EDGE_TYPES:
            raise SchemaError(f"edge type {t} out of range")
        if not (0 <= s < n and 0 <= d < n):
            raise SchemaError(f"arc {a!r} references a missing node")
        arcs.append((s, d, t))
    params: list[Optional[float]] = [None] * n
    for k, v in blob.get("params", {}).items():
        try:
            i = int(k)
        except ValueError:
            raise SchemaError(f"bad param key {k!r}") from None
        if not 0 <= i < n:
            raise SchemaError(f"param for missing node {i}")
        params[i] = float(v)
    return CircuitGraph(tuple(nodes), tuple(arcs), tuple(params),
                        str(blob.get("name", "")), str(blob.get("origin", "")))


def from_json(text: str) -> CircuitGraph:
    try:
        blob = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    return from_dict(blob)
