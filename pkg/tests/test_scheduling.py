import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvp2p.layers import LayerId
from mvp2p.scheduling import (
    SERVER,
    Request,
    WeightedChoice,
    balanced_next,
    capability,
    deadline_slack,
    peer_process_queue,
    playback_fraction,
    select_supplier_partial,
    select_supplier_pure,
    sequential_next,
    server_process_queue,
    service_order,
    upload_admits,
)
from mvp2p.sim.windows import ChunkId, SlidingWindows
from mvp2p.srt import TitForTatLedger, srt_next_chunk, srt_select_supplier

L = LayerId


def windows(graph, layers, lo, hi, received=(), urgent=-1):
    return SlidingWindows.for_layers(graph, layers, lo, hi, urgent,
                                     received=[ChunkId(l, i) for l, i in received])


# ---- windows and sequential scheduling ----------------------------------
def test_sequential_earliest_deadline(graph):
    w = windows(graph, [L(0, 0)], 11, 12)
    assert sequential_next(w, graph) == ChunkId(L(0, 0), 11)


def test_sequential_ties_go_to_lower_don(graph):
    w = windows(graph, [L(0, 0), L(0, 1)], 11, 11)
    assert sequential_next(w, graph) == ChunkId(L(0, 0), 11)


def test_sequential_all_received(graph):
    w = windows(graph, [L(0, 0)], 11, 12, received=[(L(0, 0), 11), (L(0, 0), 12)])
    assert sequential_next(w, graph) is None


def test_received_never_rerequested(graph):
    w = windows(graph, [L(0, 0), L(2, 0)], 5, 9)
    seen = set()
    while (k := w.sequential_next()) is not None:
        assert k not in seen
        seen.add(k)
        w.mark_requested(k)
        w.mark_received(k)
    assert len(seen) == 10


def test_refused_request_becomes_missing_again(graph):
    w = windows(graph, [L(0, 0)], 0, 3)
    k = w.sequential_next()
    w.mark_requested(k)
    assert w.sequential_next() != k
    w.mark_missing(k)
    assert w.sequential_next() == k


def test_retired_layer_keeps_earlier_slots(graph):
    w = windows(graph, [L(0, 0), L(0, 1)], 0, 10)
    don = graph.layer_don(L(0, 1))
    w.retire_layer(don, 3)
    assert w.covers(don, 2) and not w.covers(don, 3)
    w.advance(3)
    assert don not in w.start


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sequential_is_earliest_missing(seed):
    from mvp2p.layers import ballroom

    g = ballroom()
    rng = random.Random(seed)
    layers = rng.sample(g.sorted_layers(), rng.randint(1, 6))
    lo, hi = rng.randint(0, 20), rng.randint(20, 30)
    got = [(l, i) for l in layers for i in range(lo, hi + 1) if rng.random() < 0.7]
    w = windows(g, layers, lo, hi, received=got)
    missing = [(i, g.layer_don(l)) for l in layers for i in range(lo, hi + 1) if (l, i) not in got]
    want = min(missing) if missing else None
    k = w.sequential_next()
    assert (None if k is None else w.split(k)) == want


# ---- playback fraction and balanced scheduling --------------------------
def test_playback_fraction(graph):
    assert playback_fraction(534_914, 2_000_000) == pytest.approx(0.267, abs=5e-4)
    assert playback_fraction(2e6, 2e6) == 1.0
    assert playback_fraction(0, 2e6) == 0.0
    with pytest.raises(ValueError):
        playback_fraction(1.0, 0.0)


def test_balanced_always_sequential_at_p1(graph):
    w = windows(graph, [L(0, 0)], 14, 15)
    rng = random.Random(0)
    copies = {ChunkId(L(0, 0), 15): 1, ChunkId(L(0, 0), 14): 3}
    for _ in range(50):
        assert balanced_next(1.0, w, graph, {L(0, 0): 1.0}, copies, rng) == ChunkId(L(0, 0), 14)


def test_balanced_rarest_wins(graph):
    w = windows(graph, [L(0, 0)], 14, 15)
    copies = {ChunkId(L(0, 0), 14): 2, ChunkId(L(0, 0), 15): 1}
    assert balanced_next(0.0, w, graph, {L(0, 0): 1.0}, copies, random.Random(0)) == ChunkId(L(0, 0), 15)


def test_balanced_ties_go_to_smaller_index(graph):
    w = windows(graph, [L(0, 0)], 14, 15)
    copies = {ChunkId(L(0, 0), 14): 2, ChunkId(L(0, 0), 15): 2}
    assert balanced_next(0.0, w, graph, {L(0, 0): 1.0}, copies, random.Random(0)) == ChunkId(L(0, 0), 14)


def test_balanced_sequential_frequency(graph):
    # the rarest chunk is index 20, the sequential one index 10
    w = windows(graph, [L(0, 0)], 10, 20)
    copies = {ChunkId(L(0, 0), i): 5 for i in range(10, 20)}
    copies[ChunkId(L(0, 0), 20)] = 1
    rng = random.Random(42)
    seq = sum(balanced_next(0.4, w, graph, {L(0, 0): 1.0}, copies, rng).index == 10
              for _ in range(10_000))
    assert 4000 - 150 <= seq <= 4000 + 150


def test_weighted_choice_frequencies():
    dist = WeightedChoice({"a": 0.6, "b": 0.4, "c": 0.0})
    assert dist.items == ["a", "b"]
    rng = random.Random(7)
    hits = sum(dist.sample(rng) == "a" for _ in range(10_000))
    assert 6000 - 150 <= hits <= 6000 + 150
    assert WeightedChoice({}).sample(rng) is None


# ---- deadlines ----------------------------------------------------------
def test_deadline_slack_switch_example():
    # 1 s to the deadline, 0.6 s RTT, 0.1 s transfer: J = 1 - 0.7 - 0.6
    j = deadline_slack(deadline=11.0, now=10.0, rtt=0.6, chunk_bits=200_000, inbound_bps=2e6)
    assert j == pytest.approx(-0.3)


def test_deadline_slack_limits():
    assert deadline_slack(1000.0, 0.0, 0.6, 1e5, 2e6) > 0
    assert deadline_slack(5.0, 1.0, 0.25, 0.0, 2e6) == pytest.approx(4.0 - 0.5)
    assert deadline_slack(5.0, 1.0, 0.1, 1e6, 2e6, 5e5) == pytest.approx(4.0 - 0.2 - 2.0)
    with pytest.raises(ValueError):
        deadline_slack(5.0, 1.0, 0.1, 1e6, 0.0)


# ---- supplier selection -------------------------------------------------
def test_pure_single_holder():
    assert select_supplier_pure({"A": [7]}, {"A": 1.0}, random.Random(0)) == 7


def test_pure_subset_frequencies():
    rng = random.Random(3)
    cands = {"A": [1], "B": [2]}
    hits = sum(select_supplier_pure(cands, {"A": 0.6, "B": 0.4}, rng) == 1 for _ in range(10_000))
    assert 6000 - 150 <= hits <= 6000 + 150


def test_pure_none_when_drawn_subset_unavailable():
    assert select_supplier_pure({"A": []}, {"A": 1.0}, random.Random(0)) is None
    assert select_supplier_pure({}, {}, random.Random(0)) is None


def test_partial_negative_slack_goes_to_server():
    assert select_supplier_partial(-0.1, {"A": [1, 2]}, {"A": 1.0}, random.Random(0)) == SERVER


def test_partial_matches_pure_when_pure_succeeds():
    for seed in range(20):
        cands = {"A": [1, 2], "B": [3]}
        sel = {"A": 0.5, "B": 0.5}
        pure = select_supplier_pure(cands, sel, random.Random(seed))
        assert select_supplier_partial(0.5, cands, sel, random.Random(seed)) == pure


def test_partial_falls_back_outside_model():
    # only a subset with zero model share holds the chunk
    assert select_supplier_partial(0.5, {"Z": [9]}, {"A": 1.0}, random.Random(0)) == 9
    assert select_supplier_partial(0.5, {}, {"A": 1.0}, random.Random(0)) == SERVER


# ---- capability and queues ----------------------------------------------
def test_capability():
    assert capability(800_000, 0.25) == 200_000
    assert capability(800_000, 0.0) == 0
    assert capability(0.0, 0.7) == 0
    with pytest.raises(ValueError):
        capability(1.0, 1.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(0, 1)), min_size=1, max_size=10),
       st.floats(0.01, 100))
def test_service_order_invariant_under_capability_scaling(pairs, k):
    reqs = [Request(i, 0, i, 1.0, capability=capability(o, r), seq=i) for i, (o, r) in enumerate(pairs)]
    scaled = [Request(i, 0, i, 1.0, capability=capability(o * k, r), seq=i) for i, (o, r) in enumerate(pairs)]
    assert service_order(reqs)[0].seq == service_order(scaled)[0].seq


def _req(seq, cap=0.0, rarity=0, key=0, rho=1.0, rescue=False, bits=100.0):
    return Request(seq, SERVER, key, bits, capability=cap, rho=rho, rarity=rarity, seq=seq, rescue=rescue)


def test_server_refuses_when_copies_exhausted():
    r = _req(1)
    out = server_process_queue([r], {0: 2}, {0: 2}, lambda k: k)
    assert out == [(r, False)]


def test_server_serves_rescue_past_quota():
    r = _req(1, rescue=True)
    sent = {0: 2}
    assert server_process_queue([r], {0: 2}, sent, lambda k: k) == [(r, True)]
    assert sent[0] == 3


def test_server_order_capability_then_rarity():
    a, b = _req(1, cap=100e3), _req(2, cap=200e3)
    out = server_process_queue([a, b], {0: 1}, {}, lambda k: k)
    assert out == [(b, True), (a, False)]
    c, d = _req(3, cap=5.0, rarity=3, key=1), _req(4, cap=5.0, rarity=1, key=2)
    order = [r for r, _ in server_process_queue([c, d], {1: 1, 2: 1}, {}, lambda k: k)]
    assert order == [d, c]


def test_server_never_exceeds_copy_count():
    rng = random.Random(5)
    reqs = [_req(i, cap=rng.random(), key=rng.randrange(4)) for i in range(60)]
    sent: dict = {}
    copies = {0: 1, 1: 2, 2: 3, 3: 0}
    server_process_queue(reqs, copies, sent, lambda k: k)
    assert all(sent.get(k, 0) <= max(copies[k], 0) for k in copies)


def test_peer_queue_busy_refuses():
    r = _req(1)
    assert peer_process_queue([r], 0.0, 1000.0) == [(r, False)]
    assert not upload_admits(10.0, 0.0, 100.0)
    assert upload_admits(500.0, 100.0, 100.0)  # an idle uploader takes one chunk


def test_peer_queue_capacity_for_one():
    lo, hi = _req(1, cap=1.0), _req(2, cap=2.0)
    assert peer_process_queue([lo, hi], 150.0, 1000.0) == [(hi, True), (lo, False)]
    zero, some = _req(3, cap=0.0), _req(4, cap=capability(1e5, 0.1))
    assert peer_process_queue([zero, some], 150.0, 1000.0) == [(some, True), (zero, False)]


# ---- SRT ----------------------------------------------------------------
def test_srt_urgent_gap_first(graph):
    w = windows(graph, [L(0, 0), L(0, 1)], 11, 14, urgent=12)
    copies = {ChunkId(L(0, 1), 14): 1}
    assert srt_next_chunk(w, graph, copies) == ChunkId(L(0, 0), 11)


def test_srt_rarest_outside_urgent(graph):
    done = [(l, i) for l in (L(0, 0), L(0, 1)) for i in range(11, 14)]
    w = windows(graph, [L(0, 0), L(0, 1)], 11, 14, received=done, urgent=12)
    copies = {ChunkId(L(0, 0), 14): 3, ChunkId(L(0, 1), 14): 1}
    assert srt_next_chunk(w, graph, copies) == ChunkId(L(0, 1), 14)


def test_srt_all_received(graph):
    w = windows(graph, [L(0, 0)], 11, 11, received=[(L(0, 0), 11)], urgent=11)
    assert srt_next_chunk(w, graph, {}) is None


def test_srt_supplier_choice():
    ledger = TitForTatLedger([1, 2, 3])
    rng = random.Random(0)
    assert srt_select_supplier([2], set(), ledger, rng) == 2
    assert srt_select_supplier([], set(), ledger, rng) == SERVER
    assert srt_select_supplier([1, 2], {1, 2}, ledger, rng, slack=-1.0) == SERVER
    ledger.record_received(1, 10e6 * 8)
    ledger.record_received(2, 1e6 * 8)
    assert srt_select_supplier([1, 2], {1, 2}, ledger, rng) == 1
    # a holder that unchoked us beats a better reciprocator that did not
    assert srt_select_supplier([1, 2], {2}, ledger, rng) == 2


def test_ledger_rechoke_prefers_reciprocators():
    ledger = TitForTatLedger(range(10), slots=2, optimistic=1)
    for peer, bits in [(3, 50.0), (7, 90.0), (1, 10.0)]:
        ledger.record_received(peer, bits)
    rng = random.Random(1)
    ledger.rechoke(rng)
    assert ledger.regular == {7, 3}
    ledger.rotate_optimistic(rng)
    assert len(ledger.lucky) == 1 and not ledger.lucky & ledger.regular
    assert ledger.recent(7) == 90.0
    ledger.drop(7)
    assert not ledger.is_unchoked(7)
