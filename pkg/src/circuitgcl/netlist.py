"""Flat SPICE-subset netlist parsing.

Supported cards (one per line, ``*`` starts a comment)::

    R/C/L/I<name> n1 n2 value
    M<name>       nd ng ns nb NMOS|PMOS value
    V<name>       n+ n- value

Values accept the suffixes f p n u m k meg g.  A trailing ``.end`` card is
tolerated; every other dot card (``.subckt``, ``.model``, analyses) is
rejected.  Net and device names are lower-cased and ``gnd`` is an alias of
net ``0``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

GROUND = "0"
_GROUND_ALIASES = {"0", "gnd"}

SI_SUFFIXES = {
    "meg": 1e6,
    "f": 1e-15,
    "p": 1e-12,
    "n": 1e-9,
    "u": 1e-6,
    "m": 1e-3,
    "k": 1e3,
    "g": 1e9,
}

_VALUE_RE = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)(meg|[fpnumkg])?$")


class NetlistError(ValueError):
    pass


class NetlistSyntaxError(NetlistError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line, self.reason = line, reason


class DuplicateDevice(NetlistError):
    def __init__(self, name: str):
        super().__init__(f"duplicate device name {name!r}")
        self.name = name


class NonPositiveParam(NetlistError):
    def __init__(self, name: str):
        super().__init__(f"device {name!r} has a non-positive value")
        self.name = name


class UnknownModel(NetlistError):
    def __init__(self, token: str):
        super().__init__(f"unknown MOS model {token!r} (expected NMOS or PMOS)")
        self.token = token


class DeviceKind(enum.Enum):
    RESISTOR = "R"
    CAPACITOR = "C"
    INDUCTOR = "L"
    CURRENT_SOURCE = "I"
    NMOS = "NMOS"
    PMOS = "PMOS"
    VOLTAGE_SUPPLY = "V"

    @property
    def is_mos(self) -> bool:
        return self in (DeviceKind.NMOS, DeviceKind.PMOS)


TWO_TERMINAL_ROLES = ("a", "b")
MOS_ROLES = ("drain", "gate", "source", "bulk")
SUPPLY_ROLES = ("plus", "minus")

_LETTER_KIND = {
    "r": DeviceKind.RESISTOR,
    "c": DeviceKind.CAPACITOR,
    "l": DeviceKind.INDUCTOR,
    "i": DeviceKind.CURRENT_SOURCE,
}


@dataclass(frozen=True)
class Device:
    name: str
    kind: DeviceKind
    terminals: tuple[tuple[str, str], ...]  # (role, net) in card order
    param: float

    def net(self, role: str) -> str:
        for r, n in self.terminals:
            if r == role:
                return n
        raise KeyError(role)

    @property
    def nets(self) -> tuple[str, ...]:
        return tuple(n for _, n in self.terminals)


@dataclass(frozen=True)
class Netlist:
    name: str
    nets: tuple[str, ...]
    devices: tuple[Device, ...] = field(default_factory=tuple)

    def device(self, name: str) -> Device:
        for d in self.devices:
            if d.name == name:
                return d
        raise KeyError(name)


def parse_value(token: str) -> float:
    """``'1k'`` -> 1000.0, ``'2.2meg'`` -> 2.2e6; raises ValueError otherwise."""
    m = _VALUE_RE.match(token.lower())
    if not m:
        raise ValueError(f"bad numeric value {token!r}")
    return float(m.group(1)) * SI_SUFFIXES.get(m.group(2), 1.0)


def _norm_net(tok: str) -> str:
    tok = tok.lower()
    return GROUND if tok in _GROUND_ALIASES else tok


def parse_netlist(text: str, name: str = "") -> Netlist:
    devices: list[Device] = []
    seen: set[str] = set()
    nets: dict[str, None] = {}

    for lineno, raw in enumerate(text.replace("\r\n", "\n").split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("*"):
            continue
        toks = line.split()
        head = toks[0].lower()
        if head.startswith("."):
            if head == ".end" and len(toks) == 1:
                continue
            raise NetlistSyntaxError(lineno, f"unsupported control card {toks[0]!r}")
        if head.startswith("+"):
            raise NetlistSyntaxError(lineno, "continuation lines are not supported")

        letter = head[0]
        if letter in _LETTER_KIND or letter == "v":
            if len(toks) != 4:
                raise NetlistSyntaxError(lineno, f"expected 4 fields, got {len(toks)}")
            kind = _LETTER_KIND.get(letter, DeviceKind.VOLTAGE_SUPPLY)
            roles = SUPPLY_ROLES if kind is DeviceKind.VOLTAGE_SUPPLY else TWO_TERMINAL_ROLES
            node_toks, value_tok = toks[1:3], toks[3]
        elif letter == "m":
            if len(toks) != 7:
                raise NetlistSyntaxError(lineno, f"expected 7 fields, got {len(toks)}")
            model = toks[5].upper()
            if model not in ("NMOS", "PMOS"):
                raise UnknownModel(toks[5])
            kind = DeviceKind(model)
            roles = MOS_ROLES
            node_toks, value_tok = toks[1:5], toks[6]
        else:
            raise NetlistSyntaxError(lineno, f"unsupported element {toks[0]!r}")

        try:
            value = parse_value(value_tok)
        except ValueError as exc:
            raise NetlistSyntaxError(lineno, str(exc)) from None
        if head in seen:
            raise DuplicateDevice(head)
        if kind is DeviceKind.VOLTAGE_SUPPLY:
            if value < 0:
                raise NonPositiveParam(head)
        elif value <= 0:
            raise NonPositiveParam(head)

        terms = tuple(zip(roles, (_norm_net(t) for t in node_toks)))
        if kind is DeviceKind.VOLTAGE_SUPPLY and terms[1][1] != GROUND:
            raise NetlistSyntaxError(lineno, "voltage supply minus terminal must be ground")
        seen.add(head)
        for _, n in terms:
            nets.setdefault(n)
        devices.append(Device(head, kind, terms, value))

    return Netlist(name=name, nets=tuple(nets), devices=tuple(devices))


def _fmt(value: float) -> str:
    return repr(float(value))


def serialize(netlist: Netlist) -> str:
    """Canonical text: one lower-case card per line, base-unit values."""
    lines = [f"* {netlist.name}"] if netlist.name else []
    for d in netlist.devices:
        nets = " ".join(d.nets)
        if d.kind.is_mos:
            lines.append(f"{d.name} {nets} {d.kind.value.lower()} {_fmt(d.param)}")
        else:
            lines.append(f"{d.name} {nets} {_fmt(d.param)}")
    return "\n".join(lines) + "\n"
