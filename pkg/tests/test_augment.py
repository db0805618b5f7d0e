import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuitgcl import augment as au
from circuitgcl import graph as cg
from circuitgcl.corpus import load_corpus
from circuitgcl.netlist import parse_netlist

from oracles import isomorphic, reduce_series_parallel

CORPUS = load_corpus()
RES = cg.build_graph(parse_netlist("R1 a 0 1k\nV1 a 0 1"))
NMOS_INV = cg.build_graph(parse_netlist("Vdd vdd 0 1\nMn out in 0 0 nmos 1u\n"
                                        "R1 vdd out 1k\nVi in 0 0"))


def device_of(g, code):
    return [v for v in g.device_nodes() if g.nodes[v] == code]


def test_parallel_resistor():
    r = device_of(RES, cg.RESISTOR)[0]
    g = au.augment_positive(RES, np.random.default_rng(0), mode="parallel", target=r)
    res = device_of(g, cg.RESISTOR)
    assert len(res) == 2
    assert [sorted(g.flow_neighbors(v)) for v in res] == [sorted(RES.flow_neighbors(r))] * 2
    assert g.params[res[1]] == RES.params[r]


def test_series_resistor_chain():
    r = device_of(RES, cg.RESISTOR)[0]
    g = au.augment_positive(RES, np.random.default_rng(0), mode="series", target=r)
    cg.check_invariants(g)
    r1, r2 = device_of(g, cg.RESISTOR)
    mid = set(g.flow_neighbors(r1)) & set(g.flow_neighbors(r2))
    assert len(mid) == 1 and g.nodes[mid.pop()] == cg.OTHER_NET
    ends = set(g.flow_neighbors(r1)) ^ set(g.flow_neighbors(r2))
    assert ends == set(RES.flow_neighbors(r))


def test_mos_series_copies_controls_on_drain_side():
    m = device_of(NMOS_INV, cg.NMOS)[0]
    drain = NMOS_INV.flow_neighbors(m)[0]
    g = au.augment_positive(NMOS_INV, np.random.default_rng(0), mode="series", target=m)
    cg.check_invariants(g)
    clone = device_of(g, cg.NMOS)[1]
    assert g.control_sources(clone) == NMOS_INV.control_sources(m)
    assert drain in g.flow_neighbors(clone) and drain not in g.flow_neighbors(m)


def test_mos_parallel_duplicates_all_four_arcs():
    m = device_of(NMOS_INV, cg.NMOS)[0]
    g = au.augment_positive(NMOS_INV, np.random.default_rng(0), mode="parallel", target=m)
    clone = device_of(g, cg.NMOS)[1]
    assert sorted(g.flow_neighbors(clone)) == sorted(NMOS_INV.flow_neighbors(m))
    assert g.control_sources(clone) == NMOS_INV.control_sources(m)


def test_no_device_nodes():
    empty = cg.CircuitGraph((0, 2), (), (None, None))
    with pytest.raises(au.NoDeviceNodes):
        au.augment_positive(empty, np.random.default_rng(0))
    with pytest.raises(au.NoDeviceNodes):
        au.augment_negative(empty, np.random.default_rng(0))


@pytest.mark.parametrize("text,before,after", [
    ("C1 a 0 1p\nV1 a 0 1", cg.CAPACITOR, cg.INDUCTOR),
    ("L1 a 0 1n\nV1 a 0 1", cg.INDUCTOR, cg.CAPACITOR),
    ("I1 a 0 1m\nV1 a 0 1", cg.CURRENT_SOURCE, cg.RESISTOR),
])
def test_passive_negative_rules(text, before, after):
    g0 = cg.build_graph(parse_netlist(text))
    dev = device_of(g0, before)[0]
    g = au.augment_negative(g0, np.random.default_rng(0), target=dev)
    assert g.nodes[dev] == after and g.arcs == g0.arcs and g.params == g0.params


def test_resistor_negative_is_cap_or_ind():
    r = device_of(RES, cg.RESISTOR)[0]
    seen = {au.augment_negative(RES, np.random.default_rng(s), target=r).nodes[r]
            for s in range(20)}
    assert seen == {cg.CAPACITOR, cg.INDUCTOR}


def test_nmos_negative_adds_pmos_pair_with_pmos_edge_types():
    m = device_of(NMOS_INV, cg.NMOS)[0]
    gate, bulk = NMOS_INV.control_sources(m)
    g = au.augment_negative(NMOS_INV, np.random.default_rng(0), target=m)
    cg.check_invariants(g)
    pmos = device_of(g, cg.PMOS)
    assert len(pmos) == 2
    for p in pmos:
        assert (gate, p, cg.PMOS_GATE) in g.arcs and (bulk, p, cg.PMOS_BULK) in g.arcs
        assert g.params[p] == NMOS_INV.params[m]
    assert Counter(g.nodes) - Counter(NMOS_INV.nodes) == Counter({cg.PMOS: 2, cg.OTHER_NET: 1})


@st.composite
def chains(draw):
    g = CORPUS[draw(st.integers(0, len(CORPUS) - 1))]
    seed = draw(st.integers(0, 2**31 - 1))
    steps = draw(st.lists(st.booleans(), min_size=1, max_size=5))
    return g, seed, steps


@settings(max_examples=150, deadline=None)
@given(chains())
def test_chains_preserve_invariants_and_counts(case):
    g, seed, steps = case
    rng = np.random.default_rng(seed)
    cur = g
    for positive in steps:
        before = Counter(cur.nodes)
        if positive:
            nxt, step = au.positive_step(cur, rng)
            delta = Counter(nxt.nodes) - before
            expect = Counter({cur.nodes[step.target]: 1})
            if step.kind is au.AugKind.POS_SERIES:
                expect[cg.OTHER_NET] += 1
            assert delta == expect and not (before - Counter(nxt.nodes))
        else:
            nxt, step = au.negative_step(cur, rng)
        cg.check_invariants(nxt)
        cur = nxt


@settings(max_examples=100, deadline=None)
@given(st.integers(0, len(CORPUS) - 1), st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_positive_samples_reduce_to_origin(k, seed, length):
    rng = np.random.default_rng(seed)
    g = CORPUS[k]
    s = g
    for _ in range(length):
        s = au.augment_positive(s, rng)
    if s.num_nodes <= 25:
        assert isomorphic(reduce_series_parallel(s), reduce_series_parallel(g))


def test_negative_samples_do_not_reduce_to_origin():
    rng = np.random.default_rng(0)
    for g in CORPUS:
        s = au.augment_negative(g, rng)
        assert not isomorphic(reduce_series_parallel(s), reduce_series_parallel(g))


def test_dataset_worked_example():
    corpus = [CORPUS[0], CORPUS[1]]
    samples, rel = au.generate_dataset(corpus, n_pos=2, n_neg=1, max_chain=3, seed=0)
    assert len(samples) == 8
    ids = [s.sample_id for s in samples]
    a, b = corpus[0].name, corpus[1].name
    x1, x1p, x1n = ids.index(f"{a}/orig"), ids.index(f"{a}/p00000"), ids.index(f"{a}/n00000")
    x2p = ids.index(f"{b}/p00000")
    assert rel.relation(x1, x1p) is au.Relation.POSITIVE
    assert rel.relation(x1p, x1n) is au.Relation.NEGATIVE
    assert rel.relation(x1, x2p) is au.Relation.NONEQUAL


def test_dataset_originals_only():
    samples, rel = au.generate_dataset(CORPUS[:3], 0, 0, seed=0)
    assert [s.polarity for s in samples] == [au.Polarity.ORIGINAL] * 3
    pos, neq, neg = rel.masks()
    assert pos.sum() == 0 and neg.sum() == 0 and neq.sum() == 6


def test_dataset_chain_shapes():
    samples, _ = au.generate_dataset(CORPUS[:2], 30, 30, max_chain=5, seed=4)
    for s in samples:
        if s.polarity is au.Polarity.POSITIVE:
            assert 1 <= len(s.chain) <= 5 and all(c.kind.positive for c in s.chain)
        elif s.polarity is au.Polarity.NEGATIVE:
            assert 1 <= len(s.chain) <= 5 and not s.chain[-1].kind.positive
            assert all(c.kind.positive for c in s.chain[:-1])


def test_dataset_deterministic_bytes(tmp_path):
    for d in ("a", "b"):
        s, r = au.generate_dataset(CORPUS[:3], 5, 5, seed=11)
        au.save_dataset(tmp_path / d, s, r, {"seed": 11})
    for name in ("manifest.json", "relations.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_roundtrip(tmp_path):
    s, r = au.generate_dataset(CORPUS[:2], 4, 3, seed=2)
    au.save_dataset(tmp_path, s, r)
    s2, r2 = au.load_dataset(tmp_path)
    assert s2 == s
    assert r2.to_dict() == r.to_dict()
    rec = json.loads((tmp_path / "manifest.json").read_text())["samples"][0]
    assert set(rec) == {"id", "origin_id", "polarity", "chain", "graph_file"}


def test_empty_corpus():
    with pytest.raises(au.EmptyCorpus):
        au.generate_dataset([], 1, 1)


def test_polarity_must_match_chain():
    step = au.AugStep(au.AugKind.NEG_REPLACE, 3, "cap->ind")
    with pytest.raises(au.AugmentError):
        au.AugmentedSample("x", RES, "x", (step,), au.Polarity.POSITIVE)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.sampled_from(list(au.Polarity))),
                min_size=2, max_size=12))
def test_relations_partition_pairs(items):
    rel = au.RelationIndex([str(i) for i in range(len(items))],
                           [f"o{o}" for o, _ in items], [p for _, p in items])
    pos, neq, neg = rel.masks()
    n = len(items)
    np.testing.assert_array_equal(pos + neq + neg, 1 - np.eye(n))
    for M in (pos, neq, neg):
        np.testing.assert_array_equal(M, M.T)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            (oi, pi), (oj, pj) = items[i], items[j]
            r = rel.relation(i, j)
            if oi != oj:
                assert r is au.Relation.NONEQUAL
            elif au.Polarity.NEGATIVE in (pi, pj):
                assert r is au.Relation.NEGATIVE
            else:
                assert r is au.Relation.POSITIVE
