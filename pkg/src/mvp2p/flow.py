"""Max-flow bandwidth allocation over peer subsets and demanded layers.

The network has a virtual source ``v`` feeding one supplying node per peer
subset (peers observing the same layer), edges from each supplying node to
the receiving node of every layer its members hold, and edges from each
receiving node into the sink ``t``.  A receiving node's sink capacity is
``(n - 1) * R`` because the servers always inject one copy of each layer.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from mvp2p.layers import LayerError, LayerGraph, LayerId

SOURCE = "v"
SINK = "t"
EPS = 1e-9


class FlowError(ValueError):
    pass


def supply_node(layer: LayerId) -> tuple[str, LayerId]:
    return ("s", layer)


def receive_node(layer: LayerId) -> tuple[str, LayerId]:
    return ("r", layer)


@dataclass(frozen=True)
class PeerSubsetStats:
    """Aggregate of all peers observing (or switching to) one layer."""

    observing: LayerId
    peer_count: int
    total_outbound: float

    def __post_init__(self) -> None:
        if self.peer_count < 0:
            raise FlowError("peer_count must be non-negative")
        if self.total_outbound < 0:
            raise FlowError("total_outbound must be non-negative")

    def demand_counts(self, graph: LayerGraph) -> dict[LayerId, int]:
        return {layer: self.peer_count for layer in graph.required_layers(self.observing)}


def population_from_peers(
    peers: Iterable[tuple[LayerId, float]],
) -> list[PeerSubsetStats]:
    """Group ``(observing layer, outbound bps)`` pairs into subsets."""
    counts: dict[LayerId, int] = {}
    outbound: dict[LayerId, float] = {}
    for layer, out in peers:
        counts[layer] = counts.get(layer, 0) + 1
        outbound[layer] = outbound.get(layer, 0.0) + float(out)
    return [PeerSubsetStats(l, counts[l], outbound[l]) for l in sorted(counts)]


@dataclass(frozen=True)
class FlowNetwork:
    nodes: tuple
    capacity: Mapping[tuple, float]
    demand: Mapping[LayerId, int]
    subsets: Mapping[LayerId, PeerSubsetStats]

    @property
    def edges(self) -> list[tuple]:
        return list(self.capacity)

    def has_subset(self, layer: LayerId) -> bool:
        return layer in self.subsets

    def has_receiver(self, layer: LayerId) -> bool:
        return layer in self.demand


def build_flow_network(
    graph: LayerGraph, population: Sequence[PeerSubsetStats]
) -> FlowNetwork:
    subsets: dict[LayerId, PeerSubsetStats] = {}
    for stats in population:
        if stats.observing not in graph:
            raise LayerError(f"unknown layer {stats.observing}")
        if stats.observing in subsets:
            raise FlowError(f"duplicate subset for {stats.observing}")
        subsets[stats.observing] = stats

    demand: dict[LayerId, int] = {}
    for stats in subsets.values():
        if stats.peer_count == 0:
            continue
        for layer in graph.required_layers(stats.observing):
            demand[layer] = demand.get(layer, 0) + stats.peer_count

    sink_cap = {
        layer: max(0.0, float((n - 1) * graph.bitrate[layer])) for layer, n in demand.items()
    }
    capacity: dict[tuple, float] = {}
    for obs in sorted(subsets):
        capacity[(SOURCE, supply_node(obs))] = float(subsets[obs].total_outbound)
    for obs in sorted(subsets):
        src_cap = capacity[(SOURCE, supply_node(obs))]
        for layer in sorted(graph.required_layers(obs)):
            if layer in demand:
                capacity[(supply_node(obs), receive_node(layer))] = min(
                    src_cap, sink_cap[layer]
                )
    for layer in sorted(demand):
        capacity[(receive_node(layer), SINK)] = sink_cap[layer]

    nodes: list = [SOURCE]
    nodes += [supply_node(l) for l in sorted(subsets)]
    nodes += [receive_node(l) for l in sorted(demand)]
    nodes.append(SINK)
    if len(nodes) == 2:
        nodes = [SOURCE, SINK]
    return FlowNetwork(tuple(nodes), capacity, demand, subsets)


@dataclass(frozen=True)
class FlowSolution:
    flow: Mapping[tuple, float]
    max_flow_value: float

    def value(self, u, w) -> float:
        return self.flow.get((u, w), 0.0)


def max_flow(network: FlowNetwork) -> FlowSolution:
    """Edmonds-Karp: repeatedly augment along a shortest residual path.

    Node and edge iteration follow the network's canonical order, so equal
    inputs always produce equal flow assignments.
    """
    adj: dict = {n: [] for n in network.nodes}
    residual: dict[tuple, float] = {}
    for (a, b), cap in network.capacity.items():
        if (a, b) not in residual:
            adj[a].append(b)
            adj[b].append(a)
            residual[(a, b)] = 0.0
            residual.setdefault((b, a), 0.0)
        residual[(a, b)] += cap

    scale = max(network.capacity.values(), default=0.0)
    tol = EPS * max(1.0, scale)
    total = 0.0
    while True:
        parent = {SOURCE: None}
        queue = deque([SOURCE])
        while queue and SINK not in parent:
            node = queue.popleft()
            for nxt in adj[node]:
                if nxt not in parent and residual[(node, nxt)] > tol:
                    parent[nxt] = node
                    queue.append(nxt)
        if SINK not in parent:
            break
        push = math.inf
        node = SINK
        while parent[node] is not None:
            push = min(push, residual[(parent[node], node)])
            node = parent[node]
        node = SINK
        while parent[node] is not None:
            prev = parent[node]
            residual[(prev, node)] -= push
            residual[(node, prev)] += push
            node = prev
        total += push

    flow = {}
    for edge, cap in network.capacity.items():
        f = cap - residual[edge]
        flow[edge] = min(cap, max(0.0, f))
    return FlowSolution(flow, total)


def supply_proportions(
    sol: FlowSolution, net: FlowNetwork, subset: LayerId
) -> dict[LayerId, float]:
    """Share of a subset's allocated outbound spent on each layer."""
    if not net.has_subset(subset):
        raise FlowError(f"no supplying node for {subset}")
    s = supply_node(subset)
    through = sol.value(SOURCE, s)
    if through <= EPS:
        return {}
    out = {}
    for (a, b), f in sol.flow.items():
        if a == s and f > 0.0:
            out[b[1]] = f / through
    return out


def selection_proportions(
    sol: FlowSolution, net: FlowNetwork, layer: LayerId
) -> dict[LayerId, float]:
    """Share of a layer's peer-supplied bandwidth coming from each subset."""
    if not net.has_receiver(layer):
        raise FlowError(f"no receiving node for {layer}")
    r = receive_node(layer)
    through = sol.value(r, SINK)
    if through <= EPS:
        return {}
    out = {}
    for (a, b), f in sol.flow.items():
        if b == r and f > 0.0:
            out[a[1]] = f / through
    return out


def server_quota(
    sol: FlowSolution, net: FlowNetwork, graph: LayerGraph, layer: LayerId
) -> float:
    """Server bandwidth needed for a layer: ``n * R - u(r, t)``."""
    if not net.has_receiver(layer):
        raise FlowError(f"layer {layer} is not demanded by any peer")
    n = net.demand[layer]
    return n * graph.bitrate[layer] - sol.value(receive_node(layer), SINK)


def server_copy_count(quota: float, rate: float) -> int:
    """Copies of each chunk the server injects: ``ceil(quota / rate)``."""
    if rate <= 0:
        raise FlowError("rate must be positive")
    if quota <= 0:
        return 0
    # absorb float noise from the solver so an exact multiple does not round up
    return max(0, math.ceil(quota / rate - 1e-9))


def theoretical_optimal_share(
    graph: LayerGraph, population: Sequence[PeerSubsetStats]
) -> float:
    """Minimum server share of total demand according to the max-flow bound."""
    if not population or sum(p.peer_count for p in population) == 0:
        raise FlowError("population is empty")
    net = build_flow_network(graph, population)
    sol = max_flow(net)
    demand = sum(n * graph.bitrate[l] for l, n in net.demand.items())
    quota = sum(server_quota(sol, net, graph, l) for l in net.demand)
    return quota / demand


@dataclass
class Allocation:
    """A solved network plus the lookup tables the peers and server use."""

    network: FlowNetwork
    solution: FlowSolution
    supply: dict[LayerId, dict[LayerId, float]] = field(default_factory=dict)
    selection: dict[LayerId, dict[LayerId, float]] = field(default_factory=dict)
    copies: dict[LayerId, int] = field(default_factory=dict)
    quota: dict[LayerId, float] = field(default_factory=dict)

    def contribution(self, subset: LayerId, layer: LayerId) -> float:
        return self.supply.get(subset, {}).get(layer, 0.0)

    def suppliers_of(self, layer: LayerId) -> list[LayerId]:
        """Subsets the model assigns a positive share of ``layer`` to."""
        return sorted(self.selection.get(layer, {}))

    @property
    def server_bps(self) -> float:
        return sum(self.quota.values())


def allocate(graph: LayerGraph, population: Sequence[PeerSubsetStats]) -> Allocation:
    net = build_flow_network(graph, population)
    sol = max_flow(net)
    alloc = Allocation(net, sol)
    for obs in net.subsets:
        alloc.supply[obs] = supply_proportions(sol, net, obs)
    for layer in net.demand:
        alloc.selection[layer] = selection_proportions(sol, net, layer)
        q = server_quota(sol, net, graph, layer)
        alloc.quota[layer] = q
        alloc.copies[layer] = server_copy_count(q, graph.bitrate[layer])
    return alloc
