import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuitgcl import downstream as ds
from circuitgcl import graph as cg
from circuitgcl.corpus import load_corpus, load_labels
from circuitgcl.encoders import EncoderSpec, GraphEncoder
from circuitgcl.graph import GraphBatch
from circuitgcl.netlist import NonPositiveParam, parse_netlist

from oracles import elmore_reference

INVERTER = load_corpus(["inverter"])[0]
LABELS = ["analog", "digital", "delay-line", "amplifier", "logic-gate", "oscillator"]


def small_rc(c=1e-12, r=1e3):
    return cg.build_graph(parse_netlist(f"V1 in 0 0\nR1 in out {r}\nC1 out 0 {c}"))


def test_encode_params_capacitor_value():
    g = small_rc(c=1e-12)
    rows = ds.encode_params(g)
    cap = [v for v in g.device_nodes() if g.nodes[v] == cg.CAPACITOR][0]
    assert rows[cap, cg.CAPACITOR] == pytest.approx(27.631021115928547, rel=1e-12)
    assert np.count_nonzero(rows[cap]) == 1


def test_encode_params_unit_value_and_net_rows_are_zero():
    g = small_rc(c=1.0, r=1.0)
    rows = ds.encode_params(g)
    for v in range(g.num_nodes):
        if g.nodes[v] in (cg.RESISTOR, cg.CAPACITOR) or cg.is_net(g.nodes[v]):
            assert not rows[v].any()


def test_encode_params_rejects_nonpositive():
    g = small_rc()
    bad = cg.CircuitGraph(g.nodes, g.arcs, tuple(0.0 if p is not None and p > 1 else p
                                                 for p in g.params))
    with pytest.raises(NonPositiveParam):
        ds.encode_params(bad)


def test_param_scaler_standardizes_device_columns():
    graphs = [small_rc(c=c) for c in (1e-12, 2e-12, 4e-12)]
    sc = ds.ParamScaler.fit(graphs)
    batch = GraphBatch.from_graphs(graphs)
    z = sc.transform(ds.encode_params(batch), batch.node_types)
    caps = z[batch.node_types == cg.CAPACITOR, cg.CAPACITOR]
    assert caps.mean() == pytest.approx(0.0, abs=1e-12)
    assert caps.std() == pytest.approx(1.0)
    # resistors are all identical: zero spread maps to zero, not NaN
    assert np.all(z[batch.node_types == cg.RESISTOR] == 0.0)
    assert not z[batch.node_types < 3].any()


@pytest.mark.parametrize("t,a,b,expected", [
    ({"digital", "logic-gate"}, {"digital", "logic-gate"}, {"analog"}, 0),
    ({"analog", "amplifier"}, {"analog"}, {"analog", "oscillator"}, 2),
    ({"analog"}, {"digital"}, {"analog", "amplifier"}, 1),
])
def test_task1_truth_examples(t, a, b, expected):
    assert ds.task1_truth(frozenset(t), frozenset(a), frozenset(b)) == expected


_label_sets = st.frozensets(st.sampled_from(LABELS), min_size=1)


@settings(max_examples=100, deadline=None)
@given(_label_sets, _label_sets, _label_sets)
def test_task1_truth_swap_symmetry(t, a, b):
    swap = {0: 1, 1: 0, 2: 2}
    assert ds.task1_truth(t, b, a) == swap[ds.task1_truth(t, a, b)]


def test_task1_logits_probabilities():
    params = ds.ParamSet()
    head = ds.SimilarityHead(params, 4, np.random.default_rng(0), width=8)
    rng = np.random.default_rng(1)
    probs, truth = ds.task1_logits(*rng.normal(size=(3, 4)), head,
                                   labels=(frozenset({"analog"}),) * 3)
    assert probs.shape == (3,) and probs.sum() == pytest.approx(1.0) and truth == 2


def test_random_head_accuracy_near_one_third():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 3, 30000)
    guess = rng.integers(0, 3, 30000)
    assert abs((truth == guess).mean() - 1 / 3) < 0.01


def test_r2_of_mean_is_exactly_zero_and_exact_is_one():
    y = np.random.default_rng(0).normal(size=(50, 2)) * 1e-9 + 3e-9
    assert np.all(ds.r2_score(y, np.tile(y.mean(axis=0), (50, 1))) == 0.0)
    assert np.all(ds.r2_score(y, y) == 1.0)


def test_decoder_output_dims():
    batch = GraphBatch.from_graphs([INVERTER, INVERTER])
    enc = ds.DownstreamEncoder(ds.EncoderConfig(0, 1, 1, hidden=8), seed=0)
    out = enc.forward(batch)
    rows = ds.encode_params(batch)
    for task, dim in ds.TASK_OUT_DIMS.items():
        dec = ds.Decoder(ds.ParamSet(), 8, dim, np.random.default_rng(task), hidden=8)
        assert ds.decode(out, rows, dec, batch).shape == (2, dim)
    with pytest.raises(ds.ad.ShapeMismatch):
        ds.decode(out, rows[:3], dec, batch)


def test_missing_checkpoint_and_depth_mismatch():
    with pytest.raises(ds.MissingCheckpoint):
        ds.DownstreamEncoder(ds.EncoderConfig(2, 0, 0, hidden=8))
    frozen = GraphEncoder(EncoderSpec("dice", 1, 8), seed=0)
    with pytest.raises(ValueError):
        ds.DownstreamEncoder(ds.EncoderConfig(2, 0, 0, hidden=8), frozen)


def test_mixed_depths_on_inverter():
    frozen = GraphEncoder(EncoderSpec("dice", 2, 6), seed=0)
    enc = ds.DownstreamEncoder(ds.EncoderConfig(2, 0, 2, hidden=8), frozen, seed=1)
    g = ds.encode_downstream(INVERTER, enc)
    assert g.shape == (8,) and np.all(np.isfinite(g))
    assert all(p not in list(enc.params.values()) for p in frozen.params.values())


def _task1_setup():
    graphs = load_corpus()
    labels, test = load_labels()
    return graphs, [labels[g.name] for g in graphs], test


def test_frozen_branch_is_untouched_by_training():
    graphs, lab, test = _task1_setup()
    frozen = GraphEncoder(EncoderSpec("dice", 2, 8), seed=0)
    before = {k: p.data.tobytes() for k, p in frozen.params.items()}
    ds.train_task1(graphs, lab, test, ds.EncoderConfig(2, 0, 0, hidden=8),
                   ds.DownstreamTrainConfig(lr=1e-2, epochs=5, seed=0, decoder_hidden=8),
                   frozen=frozen)
    assert {k: p.data.tobytes() for k, p in frozen.params.items()} == before
    assert all(p.grad is None or not p.grad.any() for p in frozen.params.values())


def test_task1_metrics_and_determinism():
    graphs, lab, test = _task1_setup()
    cfg = ds.DownstreamTrainConfig(lr=1e-3, epochs=20, seed=4, decoder_hidden=8)
    a = ds.train_task1(graphs, lab, test, ds.EncoderConfig(0, 0, 0, hidden=8), cfg)
    b = ds.train_task1(graphs, lab, test, ds.EncoderConfig(0, 0, 0, hidden=8), cfg)
    assert a == b
    assert a["test_triples"] == len(test) * 11 * 10  # ordered pairs of the other 11
    assert 0.0 <= a["accuracy"] <= 1.0


def test_split_sizes():
    tr, va, te = ds.split_811(500, 0)
    assert (len(tr), len(va), len(te)) == (400, 50, 50)
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(500))


def test_elmore_against_reference():
    rng = np.random.default_rng(0)
    for n in range(1, 6):
        r, c = rng.uniform(1e3, 3e3, n), rng.uniform(0.5e-12, 1.5e-12, n)
        rise, fall = ds.elmore_delays(r, c)
        assert rise == pytest.approx(elmore_reference(r, c) * 1e9, rel=1e-12)
        assert fall == pytest.approx(float(np.dot(r, c)) * 1e9, rel=1e-12)


@pytest.fixture(scope="module")
def rc_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("rc")
    csv_path = ds.make_rc_delay_dataset(d, n_rows=60, seed=3)
    return d, csv_path


def test_rc_dataset_rows_follow_formula(rc_data):
    d, csv_path = rc_data
    data = ds.load_regression_csv(csv_path)
    assert data.targets.shape == (60, 2) and data.target_names == ["rise_delay", "fall_delay"]
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    for row, g, y in zip(rows, data.graphs, data.targets):
        vals = [float(row[f"param_{i + 1}"]) for i in range(10) if row[f"param_{i + 1}"]]
        r, c = vals[0::2], vals[1::2]
        assert y[0] == pytest.approx(elmore_reference(r, c) * 1e9, rel=1e-12)
        devs = g.device_nodes()
        assert [g.params[v] for v in devs] == vals


def test_rc_dataset_is_byte_deterministic(tmp_path):
    a = ds.make_rc_delay_dataset(tmp_path / "a", n_rows=20, seed=1)
    b = ds.make_rc_delay_dataset(tmp_path / "b", n_rows=20, seed=1)
    assert a.read_bytes() == b.read_bytes()


def test_regression_csv_errors(rc_data, tmp_path):
    d, csv_path = rc_data
    side = json.loads((d / "data.json").read_text())
    side["circuits"]["rc1"]["params"]["param_1"] = 0  # the input net, not a device
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(side).replace('"graphs/', f'"{d}/graphs/'))
    with pytest.raises(ValueError):
        ds.load_regression_csv(csv_path, bad)


def test_regression_units_do_not_change_r2(rc_data):
    _, csv_path = rc_data
    data = ds.load_regression_csv(csv_path)
    scaled = ds.RegressionData(data.graphs, data.targets * 1e-9, data.circuit_ids,
                               data.target_names)
    cfg = ds.EncoderConfig(0, 1, 0, hidden=8)
    tcfg = ds.DownstreamTrainConfig(lr=1e-2, batch_size=16, epochs=3, seed=0, decoder_hidden=8,
                                    decoder_dropout=0.0)
    a = ds.train_regression(data, cfg, tcfg)
    b = ds.train_regression(scaled, cfg, tcfg)
    assert a["r2_mean"] == pytest.approx(b["r2_mean"], abs=1e-6)
    assert a["split"] == [48, 6, 6]


def test_train_task_dispatch_and_bad_task(rc_data):
    with pytest.raises(ValueError):
        ds.train_task(4, None, ds.EncoderConfig(), ds.DownstreamTrainConfig())
    data = ds.load_regression_csv(rc_data[1])
    with pytest.raises(ds.ad.ShapeMismatch):
        ds.train_task(3, data, ds.EncoderConfig(0, 0, 0, hidden=4),
                      ds.DownstreamTrainConfig(epochs=1))


def test_metrics_json_sorted_and_stable():
    text = ds.metrics_json(2, {"b": 1, "a": 2}, 0, {"r2_mean": 0.5})
    assert json.loads(text)["metrics"] == {"r2_mean": 0.5}
    assert text.index('"a"') < text.index('"b"')
    assert text == ds.metrics_json(2, {"a": 2, "b": 1}, 0, {"r2_mean": 0.5})


def test_embeddings_csv(tmp_path):
    ds.write_embeddings_csv(tmp_path / "e.csv", ["s0"], ["o"], ["Original"], np.array([[0.5, 1]]))
    assert (tmp_path / "e.csv").read_text().splitlines() == \
        ["sample_id,origin_id,polarity,dim_0,dim_1", "s0,o,Original,0.5,1.0"]
