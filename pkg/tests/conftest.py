"""Shared builders for random layer graphs and populations."""

from __future__ import annotations

import random

import pytest

from mvp2p.flow import PeerSubsetStats
from mvp2p.layers import LayerGraph, LayerId, ballroom


@pytest.fixture(scope="session")
def graph() -> LayerGraph:
    return ballroom()


def random_graph(rng: random.Random, max_layers: int = 8) -> LayerGraph:
    """A valid random stream: one root, every other layer has >= 1 earlier reference."""
    while True:
        gop = rng.choice([1, 2, 4])
        tids = gop.bit_length()  # log2(gop) + 1
        views = rng.randint(1, max(1, max_layers // tids))
        if views * tids <= max_layers:
            break
    order = list(range(views))
    rng.shuffle(order)
    layers = [LayerId(v, t) for v in order for t in range(tids)]
    base = LayerId(order[0], 0)
    rest = [l for l in layers if l != base]
    rng.shuffle(rest)
    topo = [base] + rest
    deps = {base: ()}
    for i, layer in enumerate(topo[1:], start=1):
        k = rng.randint(1, min(3, i))
        deps[layer] = tuple(rng.sample(topo[:i], k))
    bitrate = {l: rng.randint(10_000, 400_000) for l in layers}
    return LayerGraph(deps, bitrate, order, gop)


def random_population(rng: random.Random, g: LayerGraph, max_peers: int = 20) -> list[PeerSubsetStats]:
    n = rng.randint(1, max_peers)
    layers = g.sorted_layers()
    counts: dict[LayerId, int] = {}
    out: dict[LayerId, float] = {}
    for _ in range(n):
        l = rng.choice(layers)
        counts[l] = counts.get(l, 0) + 1
        out[l] = out.get(l, 0.0) + rng.choice([0.0, rng.uniform(0, 2e6)])
    return [PeerSubsetStats(l, counts[l], out[l]) for l in sorted(counts)]


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter) -> None:
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
