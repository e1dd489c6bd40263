"""Bandwidth-consumption counters collected during one simulation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Sample:
    time: float
    server_bits: float
    total_bits: float
    missed_deadlines: int
    optimal_share: float | None

    @property
    def ps(self) -> float:
        return self.server_bits / self.total_bits if self.total_bits > 0 else 0.0


@dataclass
class Metrics:
    """Counters over the analysis window (all peers joined .. horizon).

    ``server_bits`` is S and ``total_bits`` is U; both count chunk bits at
    delivery.  Invariant counters are zero in a correct run.
    """

    window: tuple[float, float] = (0.0, 0.0)
    server_bits: float = 0.0
    total_bits: float = 0.0
    rescue_server_bits: float = 0.0
    layer_server_bits: dict[str, float] = field(default_factory=dict)
    missed_deadlines: int = 0
    startup_times: dict[int, float] = field(default_factory=dict)
    switch_times: list[float] = field(default_factory=list)
    samples: list[Sample] = field(default_factory=list)
    # demand-weighted max-flow bound over the window, and on the final population
    optimal_share: float | None = None
    final_optimal_share: float | None = None
    recalculations: int = 0
    requests: int = 0
    refusals: int = 0
    server_requests: int = 0
    switches: int = 0
    departures: int = 0
    # server copies sent per chunk -> number of chunks (chunks created in window)
    server_copy_histogram: dict[int, int] = field(default_factory=dict)
    # layer -> supplying subset -> peer-uploaded bits (analysis window)
    subset_supply_bits: dict[str, dict[str, float]] = field(default_factory=dict)
    # layer -> subset -> selection proportion of the last allocation
    model_selection: dict[str, dict[str, float]] = field(default_factory=dict)
    flow_violations: int = 0
    closure_violations: int = 0
    tracker_violations: int = 0
    nonrescue_over_quota: int = 0
    capacity_violations: int = 0

    @property
    def ps(self) -> float:
        """Server share of all delivered bits."""
        if self.total_bits <= 0:
            raise ZeroDivisionError("no bits delivered in the analysis window")
        return self.server_bits / self.total_bits

    @property
    def duration(self) -> float:
        return self.window[1] - self.window[0]

    @property
    def server_bps(self) -> float:
        return self.server_bits / self.duration if self.duration > 0 else 0.0

    @property
    def total_bps(self) -> float:
        return self.total_bits / self.duration if self.duration > 0 else 0.0

    def samples_csv(self) -> str:
        layers = sorted(self.layer_server_bits)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "S", "U", "P_s", "missed_deadlines"])
        for s in self.samples:
            w.writerow([f"{s.time:.1f}", f"{s.server_bits:.0f}", f"{s.total_bits:.0f}",
                        f"{s.ps:.6f}", s.missed_deadlines])
        w.writerow([])
        w.writerow(["layer", "server_bits"])
        for l in layers:
            w.writerow([l, f"{self.layer_server_bits[l]:.0f}"])
        return buf.getvalue()
