"""Random overlay: symmetric neighbour lists and per-link one-way delays."""

from __future__ import annotations

import random
from dataclasses import dataclass


@dataclass
class Topology:
    peers: list[int]
    servers: list[int]
    neighbors: dict[int, list[int]]
    link_delay: dict[tuple[int, int], float]

    def delay(self, a: int, b: int) -> float:
        return self.link_delay[(a, b) if a < b else (b, a)]

    def max_delay(self) -> float:
        return max(self.link_delay.values(), default=0.0)


def generate_topology(
    n_peers: int,
    n_servers: int = 1,
    neighbor_count: int = 20,
    seed: int = 0,
    delay_range: tuple[float, float] = (0.010, 0.300),
) -> Topology:
    """Link peers randomly so that each has about ``neighbor_count`` peers.

    Server ids follow the peer ids; every server neighbours every peer.
    """
    if n_peers < 1:
        raise ValueError("need at least one peer")
    if n_servers < 0:
        raise ValueError("n_servers must be non-negative")
    if neighbor_count < 0 or (n_peers > 1 and neighbor_count >= n_peers) or (
        n_peers == 1 and neighbor_count > 0
    ):
        raise ValueError(
            f"neighbor_count={neighbor_count} infeasible for {n_peers} peers"
        )
    rng = random.Random(f"topology:{seed}")
    lo, hi = delay_range
    adj: dict[int, set[int]] = {p: set() for p in range(n_peers)}

    # a random ring first keeps the overlay connected
    if n_peers > 1 and neighbor_count > 0:
        ring = list(range(n_peers))
        rng.shuffle(ring)
        hops = 1 if n_peers == 2 or neighbor_count == 1 else n_peers
        for i in range(hops):
            a, b = ring[i], ring[(i + 1) % n_peers]
            if a != b:
                adj[a].add(b)
                adj[b].add(a)
        order = list(range(n_peers))
        rng.shuffle(order)
        for p in order:
            need = neighbor_count - len(adj[p])
            if need <= 0:
                continue
            pool = [q for q in range(n_peers) if q != p and q not in adj[p]]
            short = [q for q in pool if len(adj[q]) < neighbor_count]
            chosen = rng.sample(short, min(need, len(short)))
            if len(chosen) < need:
                rest = [q for q in pool if q not in chosen]
                chosen += rng.sample(rest, min(need - len(chosen), len(rest)))
            for q in chosen:
                adj[p].add(q)
                adj[q].add(p)

    delays: dict[tuple[int, int], float] = {}
    for a in range(n_peers):
        for b in sorted(adj[a]):
            if a < b:
                delays[(a, b)] = rng.uniform(lo, hi)
    servers = list(range(n_peers, n_peers + n_servers))
    for s in servers:
        for p in range(n_peers):
            delays[(p, s)] = rng.uniform(lo, hi)
    neighbors = {p: sorted(adj[p]) for p in range(n_peers)}
    return Topology(list(range(n_peers)), servers, neighbors, delays)
