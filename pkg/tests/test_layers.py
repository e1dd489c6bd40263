import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvp2p.layers import LayerError, LayerGraph, LayerId, load_layer_spec

from conftest import random_graph

L = LayerId


def test_ballroom_shape(graph):
    assert len(graph) == 20
    assert graph.max_tid == 3
    assert graph.base_layer == L(0, 0)
    assert graph.deps[L(0, 0)] == ()


def test_ballroom_total_bitrate(graph):
    assert graph.total_bitrate() == 2_135_650
    assert graph.stream_bitrate(graph.layers) == 2_135_650


def test_required_layers_examples(graph):
    assert graph.required_layers(L(0, 0)) == {L(0, 0)}
    assert graph.required_layers(L(2, 1)) == {L(0, 0), L(2, 0), L(2, 1)}
    assert graph.required_layers(L(1, 0)) == {L(0, 0), L(2, 0), L(1, 0)}


def test_stream_bitrate_examples(graph):
    assert graph.stream_bitrate(graph.required_layers(L(2, 1))) == 268_323 + 204_022 + 62_569 == 534_914
    assert graph.stream_bitrate(set()) == 0
    with pytest.raises(LayerError):
        graph.stream_bitrate({L(9, 9)})


def test_don_examples(graph):
    assert graph.layer_don(L(0, 0)) == 0
    assert graph.layer_don(L(2, 0)) < graph.layer_don(L(1, 0))
    assert graph.layer_don(L(3, 0)) < graph.layer_don(L(0, 1))
    assert sorted(graph.layer_don(l) for l in graph.layers) == list(range(20))
    with pytest.raises(LayerError):
        graph.layer_don(L(7, 0))


def test_tid_major_decode_order(graph):
    order = graph.decode_order
    assert [l.tid for l in order] == sorted(l.tid for l in order)
    assert [l.vid for l in order[:5]] == [0, 2, 1, 4, 3]


def test_unknown_observing_layer(graph):
    with pytest.raises(LayerError):
        graph.required_layers(L(5, 0))


def test_single_layer_stream():
    g = load_layer_spec("""
gop_size: 1
decode_order: [0]
layers:
  - {vid: 0, tid: 0, bitrate_bps: 1000}
""")
    assert len(g) == 1 and g.max_tid == 0
    assert g.deps[L(0, 0)] == ()


def _spec(extra_layers: str) -> str:
    return f"""
gop_size: 2
decode_order: [0, 1]
layers:
  - {{vid: 0, tid: 0, bitrate_bps: 100}}
{extra_layers}
"""


def test_cycle_rejected():
    text = _spec("""
  - {vid: 0, tid: 1, bitrate_bps: 100, deps: ["1.0"]}
  - {vid: 1, tid: 0, bitrate_bps: 100, deps: ["0.1"]}
  - {vid: 1, tid: 1, bitrate_bps: 100, deps: ["1.0"]}
""")
    with pytest.raises(LayerError, match="cycle"):
        load_layer_spec(text)


@pytest.mark.parametrize("body, msg", [
    ("""
  - {vid: 0, tid: 1, deps: ["0.0"]}
  - {vid: 1, tid: 0, bitrate_bps: 100, deps: ["0.0"]}
  - {vid: 1, tid: 1, bitrate_bps: 100, deps: ["1.0"]}
""", "bitrate"),
    ("""
  - {vid: 0, tid: 1, bitrate_bps: 100, deps: ["0.0"]}
  - {vid: 0, tid: 1, bitrate_bps: 100, deps: ["0.0"]}
  - {vid: 1, tid: 0, bitrate_bps: 100, deps: ["0.0"]}
  - {vid: 1, tid: 1, bitrate_bps: 100, deps: ["1.0"]}
""", "duplicate"),
    ("""
  - {vid: 0, tid: 1, bitrate_bps: 100, deps: ["0.0"]}
  - {vid: 1, tid: 0, bitrate_bps: 100, deps: ["0.0"]}
""", "missing layer"),
    ("""
  - {vid: 0, tid: 1, bitrate_bps: 100, deps: ["0.0"]}
  - {vid: 1, tid: 0, bitrate_bps: 100}
  - {vid: 1, tid: 1, bitrate_bps: 100, deps: ["1.0"]}
""", "independent"),
    ("""
  - {vid: 0, tid: 1, bitrate_bps: 100, deps: ["0.0"]}
  - {vid: 1, tid: 0, bitrate_bps: 0, deps: ["0.0"]}
  - {vid: 1, tid: 1, bitrate_bps: 100, deps: ["1.0"]}
""", "positive"),
])
def test_malformed_specs_rejected(body, msg):
    with pytest.raises(LayerError, match=msg):
        load_layer_spec(_spec(body))


def test_redundant_edges_are_reduced():
    g = load_layer_spec(_spec("""
  - {vid: 0, tid: 1, bitrate_bps: 100, deps: ["0.0"]}
  - {vid: 1, tid: 0, bitrate_bps: 100, deps: ["0.0"]}
  - {vid: 1, tid: 1, bitrate_bps: 100, deps: ["1.0", "0.0"]}
"""))
    assert g.deps[L(1, 1)] == (L(1, 0),)
    assert g.required_layers(L(1, 1)) == {L(0, 0), L(1, 0), L(1, 1)}


def test_unparseable_yaml():
    with pytest.raises(LayerError):
        load_layer_spec("layers: [unbalanced")
    with pytest.raises(LayerError):
        load_layer_spec("- just a list")


def _closed(g: LayerGraph, s: frozenset) -> bool:
    return all(set(g.deps[x]) <= s for x in s)


def _check_closure_properties(g: LayerGraph) -> None:
    for x in g.layers:
        req = g.required_layers(x)
        assert x in req and g.base_layer in req
        assert _closed(g, req)
        for y in g.deps[x]:
            assert g.required_layers(y) < req


def test_closure_properties_ballroom(graph):
    _check_closure_properties(graph)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_closure_properties_random(seed):
    g = random_graph(random.Random(seed))
    _check_closure_properties(g)
    assert sorted(g.layer_don(l) for l in g.layers) == list(range(len(g)))
    # the closure is exactly the set of layers reachable along references
    for x in g.layers:
        reach, stack = set(), [x]
        while stack:
            n = stack.pop()
            if n not in reach:
                reach.add(n)
                stack.extend(g.deps[n])
        assert g.required_layers(x) == reach


def test_removing_required_layer_makes_undecodable(graph):
    def decodable(target, have):
        return target in have and all(decodable(d, have) for d in graph.deps[target])

    for x in graph.layers:
        req = graph.required_layers(x)
        assert decodable(x, req)
        for y in req:
            assert not decodable(x, req - {y})
