"""Single-cell wireless link model with proportional-fair RB scheduling.

Rates follow the Shannon-style expression
``r * B * log2(E_o[1 + P * o * d**-2 / (I + B * N0)])`` where ``o`` is
unit-mean Rayleigh fading power.  Because ``o`` enters linearly, the
expectation inside the log is simply the mean SNR.  The ergodic variant
(expectation outside the log) is available for sensitivity studies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import exp1, hyperu

from .errors import ConfigurationError, DomainError
from .rng import derive_rng

UPLINK = "up"
DOWNLINK = "down"


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class LinkModel:
    cell_radius_m: float = 500.0
    total_bandwidth_hz: float = 2.0e7
    num_rbs: int = 100
    rb_bandwidth_hz: float = 1.8e5
    tx_power_dbm: Mapping = field(default_factory=lambda: {"enb": 30.0, "ue": 10.0})
    noise_psd_dbm_hz: float = -174.0
    interference_w: float = 0.0
    pathloss_exponent: float = 2.0
    fading: str = "mean"  # "mean": E inside the log; "ergodic": E outside; "instantaneous": draw o per slot

    def __post_init__(self):
        if self.num_rbs * self.rb_bandwidth_hz > self.total_bandwidth_hz * (1 + 1e-12):
            raise ConfigurationError(
                f"{self.num_rbs} RBs x {self.rb_bandwidth_hz} Hz exceed total bandwidth {self.total_bandwidth_hz} Hz")
        if self.interference_w < 0:
            raise ConfigurationError("interference_w must be nonnegative")
        if self.fading not in ("mean", "ergodic", "instantaneous"):
            raise ConfigurationError(f"unknown fading mode {self.fading!r}")

    def power_w(self, direction: str) -> float:
        return dbm_to_watts(self.tx_power_dbm["enb" if direction == DOWNLINK else "ue"])

    def noise_w(self) -> float:
        return self.interference_w + self.rb_bandwidth_hz * dbm_to_watts(self.noise_psd_dbm_hz)

    def mean_snr(self, distance_m: float, direction: str = UPLINK, power_w: Optional[float] = None) -> float:
        if distance_m <= 0:
            raise DomainError(f"distance must be positive, got {distance_m}")
        p = self.power_w(direction) if power_w is None else power_w
        return p * distance_m ** (-self.pathloss_exponent) / self.noise_w()


def _exp_e1(x: float) -> float:
    """exp(x) * E1(x); the Tricomi form avoids overflowing exp at large x."""
    return float(np.exp(x) * exp1(x)) if x < 500.0 else float(hyperu(1.0, 1.0, x))


def expected_rate(link: LinkModel, distance_m: float, r_rbs: int = 1, direction: str = UPLINK,
                  power_w: Optional[float] = None, expectation: Optional[str] = None) -> float:
    """Achievable rate in bit/s over ``r_rbs`` resource blocks at ``distance_m``."""
    if not 1 <= r_rbs <= link.num_rbs:
        raise DomainError(f"r_rbs must be in [1, {link.num_rbs}], got {r_rbs}")
    snr = link.mean_snr(distance_m, direction, power_w)
    mode = expectation or ("ergodic" if link.fading == "ergodic" else "mean")
    if mode == "ergodic":
        # E[log2(1 + s*o)], o ~ Exp(1)  ==  exp(1/s) * E1(1/s) / ln 2
        spectral = 0.0 if snr == 0 else _exp_e1(1.0 / snr) / math.log(2.0)
    else:
        spectral = math.log1p(snr) / math.log(2.0)
    # scale the single-RB rate last so rate(r) == r * rate(1) exactly
    return r_rbs * (link.rb_bandwidth_hz * spectral)


@dataclass
class NodePlacement:
    positions: dict  # node id -> (x, y) metres; the eNB/edge server sits at the origin

    def distance(self, a: str, b: str) -> float:
        (xa, ya), (xb, yb) = self.positions[a], self.positions[b]
        return math.hypot(xa - xb, ya - yb)


def place_nodes(n: int, radius_m: float = 500.0, seed: int = 0, prefix: str = "source",
                edge_node: str = "edge") -> NodePlacement:
    """``n`` UEs uniform over the disk of ``radius_m`` (r = R*sqrt(u)) plus the edge node at the origin."""
    if n < 1:
        raise ConfigurationError(f"need at least one node, got {n}")
    rng = derive_rng(seed, "placement")
    radius = radius_m * np.sqrt(rng.random(n))
    theta = 2.0 * np.pi * rng.random(n)
    pos = {f"{prefix}{k}": (float(radius[k] * np.cos(theta[k])), float(radius[k] * np.sin(theta[k])))
           for k in range(n)}
    pos[edge_node] = (0.0, 0.0)
    return NodePlacement(pos)


@dataclass
class Flow:
    flow_id: str
    src: str
    dst: str
    bytes_remaining: int


@dataclass
class ScheduleState:
    slot_duration_s: float = 1e-3
    ema_window_slots: int = 100
    avg_throughput: dict = field(default_factory=dict)
    warm_start_bps: float = 1.0

    def __post_init__(self):
        if self.slot_duration_s <= 0 or self.ema_window_slots <= 0:
            raise ConfigurationError("slot duration and EMA window must be positive")

    def average(self, flow_id: str) -> float:
        return self.avg_throughput.get(flow_id, self.warm_start_bps)


def flow_direction(flow: Flow, edge_node: str = "edge") -> str:
    return DOWNLINK if flow.src == edge_node else UPLINK


def per_rb_rate(flow: Flow, link: LinkModel, placement: NodePlacement, fading_draw: float = 1.0) -> float:
    direction = flow_direction(flow)
    d = placement.distance(flow.src, flow.dst)
    if fading_draw == 1.0:
        return expected_rate(link, d, 1, direction)
    return link.rb_bandwidth_hz * math.log1p(fading_draw * link.mean_snr(d, direction)) / math.log(2.0)


def schedule_slot(state: ScheduleState, flows: Sequence[Flow], link: LinkModel, placement: NodePlacement,
                  rates: Optional[Sequence[float]] = None) -> dict:
    """Grant every RB of one slot by the PF metric and drain the served bytes.

    RBs are handed out one by one to the backlogged flow with the largest
    per-RB rate / average throughput; a flow whose backlog is covered by the
    RBs it already holds drops out of contention for the rest of the slot.
    Returns bytes served per flow id; ``flows`` are mutated in place.
    """
    if rates is None:
        rates = [per_rb_rate(f, link, placement) for f in flows]
    held = [0] * len(flows)
    metric = [rates[i] / state.average(f.flow_id) for i, f in enumerate(flows)]
    bits_per_rb = [rate * state.slot_duration_s for rate in rates]
    free = link.num_rbs
    while free:
        best, best_metric = -1, -1.0
        for i, f in enumerate(flows):
            if f.bytes_remaining * 8 > held[i] * bits_per_rb[i] and metric[i] > best_metric:
                best, best_metric = i, metric[i]
        if best < 0:
            break
        need = math.ceil((flows[best].bytes_remaining * 8 - held[best] * bits_per_rb[best]) / bits_per_rb[best]) \
            if bits_per_rb[best] > 0 else free
        grant = max(1, min(free, need))
        held[best] += grant
        free -= grant
    served = {}
    alpha = 1.0 / state.ema_window_slots
    for i, f in enumerate(flows):
        nbytes = min(f.bytes_remaining, int(held[i] * bits_per_rb[i] // 8))
        f.bytes_remaining -= nbytes
        served[f.flow_id] = nbytes
        state.avg_throughput[f.flow_id] = (1 - alpha) * state.average(f.flow_id) + \
            alpha * nbytes * 8 / state.slot_duration_s
    return served


def simulate_transfers(flows: Sequence[Flow], link: LinkModel, placement: NodePlacement, seed: int = 0,
                       state: Optional[ScheduleState] = None, max_slots: int = 10_000_000) -> dict:
    """Run PF slots until every flow drains; return completion time (s) per flow id.

    Uplink and downlink flows use independent pools of ``num_rbs`` RBs on a
    shared slot clock.  A flow finishing during slot t completes at
    ``(t + 1) * slot_duration``; empty flows complete at 0.
    """
    flows = [Flow(f.flow_id, f.src, f.dst, int(f.bytes_remaining)) for f in flows]
    state = state or ScheduleState()
    done = {f.flow_id: 0.0 for f in flows if f.bytes_remaining == 0}
    pools = {}
    for f in flows:
        if f.bytes_remaining > 0:
            pools.setdefault(flow_direction(f), []).append(f)
    rng = derive_rng(seed, "fading") if link.fading == "instantaneous" else None
    base = {f.flow_id: per_rb_rate(f, link, placement) for f in flows}
    if any(base[f.flow_id] <= 0 for fl in pools.values() for f in fl):
        raise DomainError("a backlogged flow has zero achievable rate and would never drain")
    slot = 0
    while any(pools.values()):
        if slot >= max_slots:
            raise RuntimeError(f"transfers did not drain within {max_slots} slots")
        for direction in sorted(pools):
            active = pools[direction]
            if not active:
                continue
            if rng is None:
                rates = [base[f.flow_id] for f in active]
            else:
                rates = [per_rb_rate(f, link, placement, float(rng.exponential())) for f in active]
            schedule_slot(state, active, link, placement, rates)
            for f in active:
                if f.bytes_remaining == 0:
                    done[f.flow_id] = (slot + 1) * state.slot_duration_s
            pools[direction] = [f for f in active if f.bytes_remaining > 0]
        slot += 1
    return done
