"""Layer-dependency-aware live multiview video streaming over a BitTorrent-like
P2P overlay: max-flow bandwidth allocation, peer strategies and a
discrete-event simulator."""

from mvp2p.layers import LayerGraph, LayerId, ballroom, load_layer_spec

__all__ = ["LayerGraph", "LayerId", "ballroom", "load_layer_spec"]
