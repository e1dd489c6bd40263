"""MVC layer set, dependency DAG, decoding order and per-layer bitrates."""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import yaml


class LayerError(ValueError):
    """Raised for malformed layer specifications or unknown layers."""


class LayerId(NamedTuple):
    vid: int
    tid: int

    def __str__(self) -> str:
        return f"L{self.vid}.{self.tid}"

    @classmethod
    def parse(cls, text: str) -> "LayerId":
        """Parse ``"vid.tid"`` (an optional leading ``L`` is accepted)."""
        raw = text.strip().lstrip("Ll")
        try:
            vid, tid = raw.split(".")
            return cls(int(vid), int(tid))
        except ValueError as exc:
            raise LayerError(f"bad layer reference {text!r}") from exc


class LayerGraph:
    """Immutable layer-dependency graph of one MVC stream.

    ``deps`` holds the direct references after transitive reduction, so an
    edge implied through another reference layer is never stored twice.
    """

    def __init__(
        self,
        deps: Mapping[LayerId, Iterable[LayerId]],
        bitrate: Mapping[LayerId, int],
        view_decode_order: Iterable[int],
        gop_size: int,
        name: str = "",
    ) -> None:
        self.name = name
        self.gop_size = int(gop_size)
        self.view_decode_order = tuple(int(v) for v in view_decode_order)
        raw = {LayerId(*k): tuple(LayerId(*d) for d in v) for k, v in deps.items()}
        self._validate(raw, bitrate)
        self.layers = frozenset(raw)
        self.bitrate = {layer: int(bitrate[layer]) for layer in raw}
        self.max_tid = int(math.log2(self.gop_size))

        closure = _closures(raw)
        self._required = {k: frozenset(v) for k, v in closure.items()}
        self.deps = {
            layer: tuple(sorted(_reduce(layer, refs, closure)))
            for layer, refs in raw.items()
        }
        view_rank = {v: i for i, v in enumerate(self.view_decode_order)}
        ordered = sorted(self.layers, key=lambda l: (l.tid, view_rank[l.vid]))
        self.decode_order = tuple(ordered)
        self._don = {layer: i for i, layer in enumerate(ordered)}
        self.base_layer = LayerId(self.view_decode_order[0], 0)

    def _validate(self, raw: dict[LayerId, tuple[LayerId, ...]], bitrate) -> None:
        if self.gop_size < 1 or self.gop_size & (self.gop_size - 1):
            raise LayerError(f"gop_size must be a power of two, got {self.gop_size}")
        if not self.view_decode_order:
            raise LayerError("decode_order is empty")
        if len(set(self.view_decode_order)) != len(self.view_decode_order):
            raise LayerError("decode_order repeats a view")
        max_tid = int(math.log2(self.gop_size))
        views = set(self.view_decode_order)
        for layer, refs in raw.items():
            if layer.vid not in views:
                raise LayerError(f"{layer} belongs to a view missing from decode_order")
            if not 0 <= layer.tid <= max_tid:
                raise LayerError(f"{layer} tid exceeds log2(gop_size) = {max_tid}")
            if layer not in bitrate:
                raise LayerError(f"missing bitrate for {layer}")
            if bitrate[layer] <= 0:
                raise LayerError(f"bitrate of {layer} must be positive")
            for ref in refs:
                if ref not in raw:
                    raise LayerError(f"{layer} references undeclared layer {ref}")
                if ref == layer:
                    raise LayerError(f"{layer} references itself")
        for vid in views:
            for tid in range(max_tid + 1):
                if LayerId(vid, tid) not in raw:
                    raise LayerError(f"missing layer L{vid}.{tid}")
        _check_acyclic(raw)
        roots = [layer for layer, refs in raw.items() if not refs]
        base = LayerId(self.view_decode_order[0], 0)
        if roots != [base]:
            raise LayerError(
                f"exactly one independent layer ({base}) expected, found "
                f"{sorted(map(str, roots))}"
            )

    def __contains__(self, layer: object) -> bool:
        return layer in self.layers

    def __len__(self) -> int:
        return len(self.layers)

    def _known(self, layer: LayerId) -> LayerId:
        if layer not in self.layers:
            raise LayerError(f"unknown layer {layer}")
        return layer

    def required_layers(self, observing: LayerId) -> frozenset[LayerId]:
        """All layers needed to decode ``observing``, itself included."""
        return self._required[self._known(observing)]

    def layer_don(self, layer: LayerId) -> int:
        """Decoding-order rank: lower tid first, then view decoding order."""
        return self._don[self._known(layer)]

    def stream_bitrate(self, layers: Iterable[LayerId]) -> int:
        return sum(self.bitrate[self._known(layer)] for layer in set(layers))

    def total_bitrate(self) -> int:
        return sum(self.bitrate.values())

    def sorted_layers(self) -> list[LayerId]:
        """Layers in (vid, tid) order; the canonical iteration order."""
        return sorted(self.layers)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gop_size": self.gop_size,
            "decode_order": list(self.view_decode_order),
            "layers": [
                {
                    "vid": l.vid,
                    "tid": l.tid,
                    "bitrate_bps": self.bitrate[l],
                    "deps": [f"{d.vid}.{d.tid}" for d in self.deps[l]],
                }
                for l in self.sorted_layers()
            ],
        }


def _check_acyclic(raw: Mapping[LayerId, tuple[LayerId, ...]]) -> None:
    state: dict[LayerId, int] = {}

    def visit(node: LayerId, path: list[LayerId]) -> None:
        mark = state.get(node)
        if mark == 2:
            return
        if mark == 1:
            cycle = path[path.index(node):] + [node]
            raise LayerError("dependency cycle: " + " -> ".join(map(str, cycle)))
        state[node] = 1
        path.append(node)
        for ref in raw[node]:
            visit(ref, path)
        path.pop()
        state[node] = 2

    for node in sorted(raw):
        visit(node, [])


def _closures(raw: Mapping[LayerId, tuple[LayerId, ...]]) -> dict[LayerId, set[LayerId]]:
    out: dict[LayerId, set[LayerId]] = {}

    def close(node: LayerId) -> set[LayerId]:
        if node not in out:
            acc = {node}
            for ref in raw[node]:
                acc |= close(ref)
            out[node] = acc
        return out[node]

    for node in raw:
        close(node)
    return out


def _reduce(layer, refs, closure) -> set[LayerId]:
    refs = set(refs)
    return {
        r for r in refs if not any(r in closure[o] for o in refs if o != r)
    }


def parse_layer_spec(doc: Mapping) -> LayerGraph:
    """Build a graph from an already-parsed layer spec document."""
    try:
        gop = int(doc["gop_size"])
        order = [int(v) for v in doc["decode_order"]]
        entries = doc["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise LayerError(f"layer spec lacks a required section: {exc}") from exc
    views = doc.get("views")
    if views is not None:
        declared = {int(v) for v in views}
        if declared != set(order):
            raise LayerError("views and decode_order disagree")
    deps: dict[LayerId, tuple[LayerId, ...]] = {}
    bitrate: dict[LayerId, int] = {}
    for entry in entries or []:
        layer = LayerId(int(entry["vid"]), int(entry["tid"]))
        if layer in deps:
            raise LayerError(f"duplicate layer {layer}")
        deps[layer] = tuple(LayerId.parse(str(d)) for d in entry.get("deps") or [])
        if entry.get("bitrate_bps") is not None:
            bitrate[layer] = int(entry["bitrate_bps"])
    return LayerGraph(deps, bitrate, order, gop, name=str(doc.get("name", "")))


def load_layer_spec(config_text: str) -> LayerGraph:
    """Parse a YAML layer spec (sections ``views``, ``gop_size``,
    ``decode_order`` and ``layers``) into a validated graph."""
    try:
        doc = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        raise LayerError(f"unparseable layer spec: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise LayerError("layer spec must be a mapping")
    return parse_layer_spec(doc)


def load_layer_file(path: str | Path) -> LayerGraph:
    return load_layer_spec(Path(path).read_text(encoding="utf-8"))


def ballroom() -> LayerGraph:
    """The bundled 5-view, GOP-8 "ballroom" stream (20 layers)."""
    text = resources.files("mvp2p.data").joinpath("ballroom.yaml").read_text("utf-8")
    return load_layer_spec(text)


def resolve_layer_spec(ref: str | Path) -> LayerGraph:
    """Accept a bundled stream name (``"ballroom"``) or a file path."""
    if str(ref) == "ballroom":
        return ballroom()
    return load_layer_file(ref)
