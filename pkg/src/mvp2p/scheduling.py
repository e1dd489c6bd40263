"""MVP2P peer behaviour as pure functions.

Chunk scheduling (sequential / balanced), deadline slack, pure and partial
supplier selection, requester capability and the supplier-side queue
policies for servers and normal peers.  The simulator calls the key-based
variants; the ``ChunkId`` wrappers exist for callers outside the hot loop.
"""

from __future__ import annotations

import math
import random
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Hashable, Mapping, MutableMapping, Sequence

from mvp2p.layers import LayerGraph, LayerId
from mvp2p.sim.windows import ChunkId, SlidingWindows

SERVER = -1


# ---- chunk scheduling ---------------------------------------------------
def _to_chunk(graph: LayerGraph, windows: SlidingWindows, key: int | None) -> ChunkId | None:
    if key is None:
        return None
    idx, don = windows.split(key)
    return ChunkId(graph.decode_order[don], idx)


def sequential_next(windows: SlidingWindows, graph: LayerGraph) -> ChunkId | None:
    """Missing chunk with the earliest deadline; lower DON breaks ties."""
    return _to_chunk(graph, windows, windows.sequential_next())


def playback_fraction(required_bps: float, inbound_bps: float) -> float:
    """Share of inbound bandwidth consumed by plain playback, clamped to 1."""
    if inbound_bps <= 0:
        raise ValueError("inbound bandwidth must be positive")
    if required_bps <= 0:
        return 0.0
    return min(1.0, required_bps / inbound_bps)


class WeightedChoice:
    """Fixed discrete distribution sampled with one uniform draw."""

    __slots__ = ("items", "cum", "total", "weights")

    def __init__(self, weights: Mapping[Hashable, float]) -> None:
        items = [k for k in sorted(weights) if weights[k] > 0]
        self.weights = {k: weights[k] for k in items}
        self.items = items
        acc = 0.0
        cum = []
        for k in items:
            acc += weights[k]
            cum.append(acc)
        self.cum = cum
        self.total = acc

    def __bool__(self) -> bool:
        return bool(self.items)

    def sample(self, rng: random.Random):
        if not self.items:
            return None
        i = bisect_right(self.cum, rng.random() * self.total)
        return self.items[min(i, len(self.items) - 1)]


def balanced_key(
    p: float,
    windows: SlidingWindows,
    proportions: WeightedChoice | None,
    counts: Mapping[int, int],
    rng: random.Random,
    sequential: int | None = -1,
) -> int | None:
    """Key-based balanced scheduling; ``proportions`` samples layer DONs.

    ``sequential`` may pass in an already computed sequential pick.
    """
    if p >= 1.0 or rng.random() < p or not proportions:
        return windows.sequential_next() if sequential == -1 else sequential
    don = proportions.sample(rng)
    key = windows.rarest((don,), counts)
    if key is None:
        return windows.sequential_next() if sequential == -1 else sequential
    return key


def balanced_next(
    p: float,
    windows: SlidingWindows,
    graph: LayerGraph,
    proportions: Mapping[LayerId, float],
    copies: Mapping[ChunkId, int],
    rng: random.Random,
) -> ChunkId | None:
    """Sequential with probability ``p``, otherwise the rarest missing chunk
    of a layer drawn from the supply proportions."""
    dist = WeightedChoice({graph.layer_don(l): w for l, w in proportions.items()})
    counts = {
        windows.key(c.index, graph.layer_don(c.layer)): n for c, n in copies.items()
    }
    return _to_chunk(graph, windows, balanced_key(p, windows, dist, counts, rng))


# ---- deadlines ----------------------------------------------------------
def deadline_slack(
    deadline: float,
    now: float,
    rtt: float,
    chunk_bits: float,
    inbound_bps: float,
    server_outbound_bps: float = math.inf,
) -> float:
    """Time left after a worst-case peer attempt followed by a server fetch.

    Negative slack means only a direct server request can still make it.
    """
    if inbound_bps <= 0:
        raise ValueError("inbound bandwidth must be positive")
    server_time = rtt + max(chunk_bits / inbound_bps, chunk_bits / server_outbound_bps)
    return deadline - now - server_time - rtt


# ---- supplier selection -------------------------------------------------
def select_supplier_pure(
    candidates: Mapping[Hashable, Sequence[int]],
    selection: Mapping[Hashable, float] | WeightedChoice,
    rng: random.Random,
) -> int | None:
    """Draw a subset by its selection proportion, then a random available
    holder inside it.  ``None`` when the drawn subset has no such holder."""
    dist = selection if isinstance(selection, WeightedChoice) else WeightedChoice(selection)
    subset = dist.sample(rng)
    if subset is None:
        return None
    holders = candidates.get(subset)
    if not holders:
        return None
    return holders[rng.randrange(len(holders))]


def select_supplier_partial(
    slack: float,
    candidates: Mapping[Hashable, Sequence[int]],
    selection: Mapping[Hashable, float] | WeightedChoice,
    rng: random.Random,
) -> int:
    """Fallback chain for emergent chunks, ending at the server."""
    if slack < 0:
        return SERVER
    dist = selection if isinstance(selection, WeightedChoice) else WeightedChoice(selection)
    target = select_supplier_pure(candidates, dist, rng)
    if target is not None:
        return target
    designated = [s for s in dist.items if candidates.get(s)]
    if designated:
        holders = candidates[designated[rng.randrange(len(designated))]]
        return holders[rng.randrange(len(holders))]
    anyone = [s for s in sorted(candidates) if candidates[s]]
    if anyone:
        holders = candidates[anyone[rng.randrange(len(anyone))]]
        return holders[rng.randrange(len(holders))]
    return SERVER


def capability(requester_outbound: float, rho: float) -> float:
    """Outbound bandwidth the requester earmarks for re-supplying the layer."""
    if not 0.0 <= rho <= 1.0 + 1e-12:
        raise ValueError("rho must lie in [0, 1]")
    return requester_outbound * rho


# ---- supplier queues ----------------------------------------------------
@dataclass(eq=False)
class Request:
    """One outstanding chunk request as seen by both ends."""

    requester: int
    supplier: int
    key: int
    bits: float
    emergent: bool = False
    urgent: bool = False
    rescue: bool = False  # slack was negative: server must answer
    capability: float = 0.0
    rho: float = 0.0
    rarity: int = 0
    seq: int = 0
    state: int = 0  # see REQ_* below
    transfer: object = field(default=None, repr=False)


REQ_SENT, REQ_QUEUED, REQ_ACTIVE, REQ_DONE, REQ_CANCELLED = range(5)


def service_order(requests: Sequence[Request]) -> list[Request]:
    """Capability descending, then fewest copies, then arrival order."""
    return sorted(requests, key=lambda r: (-r.capability, r.rarity, r.seq))


def server_process_queue(
    requests: Sequence[Request],
    copies: Mapping[int, int],
    sent: MutableMapping[int, int],
    layer_of,
) -> list[tuple[Request, bool]]:
    """Decide every queued server request.

    Rescue requests are always sent.  Others are sent while the chunk has
    fewer than ``N`` server copies and the requester will re-supply the
    layer.  ``layer_of(key)`` maps a chunk to the key used in ``copies``.
    """
    out: list[tuple[Request, bool]] = []
    rest = []
    for r in requests:
        if r.rescue:
            sent[r.key] = sent.get(r.key, 0) + 1
            out.append((r, True))
        else:
            rest.append(r)
    for r in service_order(rest):
        m = sent.get(r.key, 0)
        if m < copies.get(layer_of(r.key), 1) and r.rho > 0.0:
            sent[r.key] = m + 1
            out.append((r, True))
        else:
            out.append((r, False))
    return out


def upload_admits(bits: float, available: float, capacity: float) -> bool:
    """Whether an upload of ``bits`` fits the supplier's remaining window.

    An idle supplier always takes one chunk, even one larger than its window.
    """
    if capacity <= 0:
        return False
    return bits <= available + 1e-9 or available >= capacity - 1e-9


def peer_process_queue(
    requests: Sequence[Request], available: float, capacity: float
) -> list[tuple[Request, bool]]:
    """Serve the best requests until the outbound window is used up."""
    out = []
    for r in service_order(requests):
        if upload_admits(r.bits, available, capacity):
            available -= r.bits
            out.append((r, True))
        else:
            out.append((r, False))
    return out
