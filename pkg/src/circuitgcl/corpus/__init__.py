"""Bundled desk-scale corpus of flat device-level netlists with Task-1 labels."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from ..graph import CircuitGraph, build_graph
from ..netlist import parse_netlist

TASK1_LABELS = ("analog", "digital", "delay-line", "amplifier", "logic-gate", "oscillator")


def corpus_dir() -> Path:
    return Path(str(resources.files(__package__)))


def circuit_names() -> list[str]:
    return sorted(p.stem for p in corpus_dir().glob("*.sp"))


def load_netlist_file(path) -> "CircuitGraph":
    path = Path(path)
    return build_graph(parse_netlist(path.read_text(encoding="utf-8"), name=path.stem))


def load_corpus(names=None, directory=None) -> list[CircuitGraph]:
    """Graphs for every ``*.sp`` file in ``directory`` (default: bundled), sorted by name."""
    root = Path(directory) if directory else corpus_dir()
    files = sorted(root.glob("*.sp"))
    if names is not None:
        wanted = list(names)
        by_stem = {f.stem: f for f in files}
        missing = [n for n in wanted if n not in by_stem]
        if missing:
            raise KeyError(f"unknown circuits {missing}")
        files = [by_stem[n] for n in wanted]
    return [load_netlist_file(f) for f in files]


def load_labels(directory=None) -> tuple[dict[str, frozenset[str]], list[str]]:
    """(label sets per circuit, names of held-out test circuits)."""
    root = Path(directory) if directory else corpus_dir()
    blob = json.loads((root / "labels.json").read_text())
    labels = {}
    for name, labs in blob["labels"].items():
        bad = set(labs) - set(TASK1_LABELS)
        if bad or not labs:
            raise ValueError(f"{name}: invalid label set {labs}")
        labels[name] = frozenset(labs)
    return labels, list(blob.get("test", []))
