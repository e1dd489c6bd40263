"""Scenario configuration and its YAML representation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

STRATEGIES = ("mvp2p", "srt")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    layer_spec: str = "ballroom"
    peer_count: int = 100
    inbound_bps: float = 2_000_000.0
    outbound_ratio: float = 0.4
    # inbound bps -> fraction of peers; overrides inbound_bps when set
    bandwidth_histogram: Mapping[float, float] | None = None
    free_rider_fraction: float = 0.0
    strategy: str = "mvp2p"
    seed: int = 0
    horizon_s: float = 600.0
    join_window: tuple[float, float] = (30.0, 100.0)
    playback_start_s: float = 30.0
    startup_delay_s: int = 6
    urgent_range_s: float = 4.0
    switch_delay_s: float = 1.0
    switch_rate_per_min: float = 0.0
    departure_fraction: float = 0.0
    recalc_interval_s: float = 15.0
    neighbor_count: int = 20
    server_bandwidth: float | str = "unlimited"
    tick_s: float = 0.2
    max_rtt_s: float = 0.6
    delay_range: tuple[float, float] = (0.010, 0.300)
    request_window_s: float = 1.0
    upload_window_s: float = 1.0
    refuse_backoff_s: float = 0.4
    sample_interval_s: float = 10.0
    # tit-for-tat (SRT only)
    unchoke_slots: int = 4
    optimistic_slots: int = 1
    rechoke_interval_s: float = 10.0
    optimistic_interval_s: float = 30.0
    tft_window_s: float = 10.0

    def __post_init__(self) -> None:
        hist = self.bandwidth_histogram
        if hist is not None:
            object.__setattr__(
                self,
                "bandwidth_histogram",
                {float(k): float(v) for k, v in dict(hist).items()},
            )
        object.__setattr__(self, "join_window", tuple(float(x) for x in self.join_window))
        object.__setattr__(self, "delay_range", tuple(float(x) for x in self.delay_range))
        if isinstance(self.server_bandwidth, str):
            if self.server_bandwidth != "unlimited":
                try:
                    object.__setattr__(self, "server_bandwidth", float(self.server_bandwidth))
                except ValueError:
                    raise ConfigError(
                        f"server_bandwidth must be a number or 'unlimited', "
                        f"got {self.server_bandwidth!r}"
                    ) from None
        object.__setattr__(self, "strategy", str(self.strategy).lower())
        self.validate()

    @property
    def server_bps(self) -> float:
        if self.server_bandwidth == "unlimited":
            return math.inf
        return float(self.server_bandwidth)

    @property
    def analysis_start(self) -> float:
        """All peers have joined from here on."""
        return self.join_window[1]

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}")
        need(self.peer_count >= 0, "peer_count must be >= 0")
        need(self.inbound_bps > 0, "inbound_bps must be positive")
        need(self.outbound_ratio >= 0, "outbound_ratio must be >= 0")
        need(0 <= self.free_rider_fraction <= 1, "free_rider_fraction must be in [0, 1]")
        need(0 <= self.departure_fraction <= 1, "departure_fraction must be in [0, 1]")
        need(self.switch_rate_per_min >= 0, "switch_rate_per_min must be >= 0")
        need(self.recalc_interval_s >= 0, "recalc_interval_s must be >= 0")
        need(self.tick_s > 0, "tick_s must be positive")
        need(self.horizon_s > 0, "horizon_s must be positive")
        lo, hi = self.join_window
        need(0 <= lo <= hi <= self.horizon_s, "join_window must lie within [0, horizon_s]")
        need(self.playback_start_s >= 0, "playback_start_s must be >= 0")
        need(self.startup_delay_s >= 1, "startup_delay_s must be >= 1")
        dlo, dhi = self.delay_range
        need(0 <= dlo <= dhi, "delay_range must satisfy 0 <= lo <= hi")
        need(self.server_bps > 0, "server_bandwidth must be positive")
        need(self.neighbor_count >= 0, "neighbor_count must be >= 0")
        if self.bandwidth_histogram is not None:
            total = sum(self.bandwidth_histogram.values())
            need(abs(total - 1.0) < 1e-6, "bandwidth_histogram fractions must sum to 1")
            need(all(k > 0 for k in self.bandwidth_histogram), "histogram bandwidths must be > 0")

    def replace(self, **changes: Any) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            if isinstance(v, Mapping):
                v = dict(v)
            out[f.name] = v
        return out


FIELD_NAMES = frozenset(f.name for f in fields(ScenarioConfig))


def config_from_dict(doc: Mapping[str, Any], base_dir: Path | None = None) -> ScenarioConfig:
    unknown = set(doc) - FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    doc = dict(doc)
    spec = doc.get("layer_spec")
    if spec and spec != "ballroom" and base_dir is not None:
        p = Path(spec)
        if not p.is_absolute():
            doc["layer_spec"] = str((base_dir / p).resolve())
    try:
        return ScenarioConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: expected a mapping")
    return config_from_dict(doc, base_dir=path.parent)
