import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuitgcl.corpus import circuit_names, corpus_dir
from circuitgcl.netlist import (DeviceKind, DuplicateDevice, NetlistSyntaxError,
                                NonPositiveParam, UnknownModel, parse_netlist, parse_value,
                                serialize)


def test_single_resistor():
    nl = parse_netlist("R1 a 0 1k")
    assert list(nl.nets) == ["a", "0"]
    (d,) = nl.devices
    assert d.kind is DeviceKind.RESISTOR and d.param == 1000.0
    assert d.net("a") == "a" and d.net("b") == "0"


def test_mos_and_supply_fields():
    nl = parse_netlist("M1 out in 0 0 NMOS 1u\nVdd vdd 0 1.0")
    m, v = nl.devices
    assert m.kind is DeviceKind.NMOS
    assert [m.net(r) for r in ("drain", "gate", "source", "bulk")] == ["out", "in", "0", "0"]
    assert m.param == pytest.approx(1e-6)
    assert v.kind is DeviceKind.VOLTAGE_SUPPLY and v.param == 1.0


def test_negative_value_rejected():
    with pytest.raises(NonPositiveParam) as info:
        parse_netlist("R1 a 0 -5")
    assert "r1" in str(info.value)


@pytest.mark.parametrize("card", ["C1 a 0 0", "L1 a 0 0", "I1 a 0 0", "M1 d g 0 0 pmos 0"])
def test_zero_device_value_rejected(card):
    with pytest.raises(NonPositiveParam):
        parse_netlist(card)


def test_zero_volt_supply_allowed():
    nl = parse_netlist("V1 in 0 0\nR1 in 0 1")
    assert nl.devices[0].param == 0.0


@pytest.mark.parametrize("token,value", [
    ("1f", 1e-15), ("2p", 2e-12), ("3n", 3e-9), ("4u", 4e-6), ("5m", 5e-3),
    ("6k", 6e3), ("7meg", 7e6), ("8g", 8e9), ("2.5", 2.5), ("1e3", 1e3), ("10MEG", 1e7),
    ("1.5e-3k", 1.5),
])
def test_si_suffixes(token, value):
    assert parse_value(token) == pytest.approx(value, rel=1e-15)


def test_unknown_model():
    with pytest.raises(UnknownModel):
        parse_netlist("M1 d g s b BJT 1")


def test_duplicate_device_is_case_insensitive():
    with pytest.raises(DuplicateDevice):
        parse_netlist("R1 a 0 1\nr1 a 0 2")


@pytest.mark.parametrize("text,line", [
    ("R1 a 0", 1),
    ("* c\nR1 a 0 1\nC2 a 0 1x", 3),
    ("X1 a b sub", 1),
    (".subckt inv a b", 1),
    ("R1 a 0 1\n+ 2", 2),
    ("V1 a b 1", 1),
])
def test_syntax_errors_carry_line(text, line):
    with pytest.raises(NetlistSyntaxError) as info:
        parse_netlist(text)
    assert info.value.line == line


def test_comments_case_crlf_and_gnd_alias():
    nl = parse_netlist("* title\r\nR1 A GND 1k\r\n\r\n.end\r\n")
    assert list(nl.nets) == ["a", "0"]
    assert nl.devices[0].name == "r1"


def test_net_order_is_first_appearance():
    nl = parse_netlist("R1 x y 1\nR2 y z 1\nR3 z x 1")
    assert list(nl.nets) == ["x", "y", "z"]


@pytest.mark.parametrize("name", circuit_names())
def test_corpus_roundtrip(name):
    text = (corpus_dir() / f"{name}.sp").read_text()
    nl = parse_netlist(text, name=name)
    again = parse_netlist(serialize(nl), name=name)
    assert again == nl


def test_parse_is_pure():
    text = (corpus_dir() / "opamp2.sp").read_text()
    assert parse_netlist(text) == parse_netlist(text)


_names = st.sampled_from(["a", "b", "c", "out", "n1", "0"])
_values = st.floats(min_value=1e-15, max_value=1e9, allow_nan=False, allow_infinity=False)


@st.composite
def random_netlists(draw):
    lines = []
    for k in range(draw(st.integers(1, 6))):
        kind = draw(st.sampled_from("RCLIM"))
        if kind == "M":
            nets = [draw(_names) for _ in range(4)]
            model = draw(st.sampled_from(["nmos", "PMOS"]))
            lines.append(f"M{k} {' '.join(nets)} {model} {draw(_values)!r}")
        else:
            lines.append(f"{kind}{k} {draw(_names)} {draw(_names)} {draw(_values)!r}")
    return "\n".join(lines)


@settings(max_examples=80, deadline=None)
@given(random_netlists())
def test_serialize_roundtrip_property(text):
    nl = parse_netlist(text)
    assert parse_netlist(serialize(nl)) == nl
