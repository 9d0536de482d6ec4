"""Traffic prediction, FLOP counting, cost ledger, and energy/carbon accounting."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .graph import LayerGraph, PlacedModel, count_parameters
from .strategy import ParadigmConfig

BYTES_PER_PARAM = 4
BYTES_PER_ACTIVATION = 4
BACKWARD_FLOP_FACTOR = 2
CARBON_INTENSITY_KG_PER_KWH = 0.243
# reference energy figures imply ~339-352 g/kWh against a 243 g/kWh grid
CALIBRATED_PUE = 1.42

PHASES = ("image_transfer", "activations", "gradients", "params_up", "params_down")
CSV_COLUMNS = ("epoch", "phase", "bytes", "comm_time_s", "flops_forward", "flops_backward")


@dataclass
class CostLedger:
    """Per-run accumulator; only the training loop that owns it writes to it."""

    bytes_by_phase: dict = field(default_factory=lambda: defaultdict(int))
    comm_time_by_phase: dict = field(default_factory=lambda: defaultdict(float))
    flops_by_epoch: dict = field(default_factory=lambda: defaultdict(lambda: [0, 0]))
    measured_compute_s: float = 0.0
    modeled_compute_s: float = 0.0
    energy_kwh: float = 0.0
    carbon_g: float = 0.0

    def log_bytes(self, epoch: int, phase: str, nbytes: int, seconds: float = 0.0) -> None:
        if nbytes < 0 or seconds < 0:
            raise ValueError("ledger entries must be nonnegative")
        self.bytes_by_phase[(epoch, phase)] += int(nbytes)
        self.comm_time_by_phase[(epoch, phase)] += float(seconds)

    def log_flops(self, epoch: int, forward: int, backward: int = 0) -> None:
        entry = self.flops_by_epoch[epoch]
        entry[0] += int(forward)
        entry[1] += int(backward)

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_phase.values())

    @property
    def comm_time_s(self) -> float:
        return sum(self.comm_time_by_phase.values())

    @property
    def flops_forward(self) -> int:
        return sum(v[0] for v in self.flops_by_epoch.values())

    @property
    def flops_backward(self) -> int:
        return sum(v[1] for v in self.flops_by_epoch.values())

    def bytes_in_phase(self, phase: str) -> int:
        return sum(v for (_, p), v in self.bytes_by_phase.items() if p == phase)

    def rows(self) -> list:
        keys = sorted(set(self.bytes_by_phase) | {(e, "compute") for e in self.flops_by_epoch})
        out = []
        for epoch, phase in keys:
            fwd, bwd = self.flops_by_epoch[epoch] if phase == "compute" else (0, 0)
            out.append({"epoch": epoch, "phase": phase, "bytes": self.bytes_by_phase.get((epoch, phase), 0),
                        "comm_time_s": repr(self.comm_time_by_phase.get((epoch, phase), 0.0)),
                        "flops_forward": fwd, "flops_backward": bwd})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows())

    def summary(self) -> dict:
        return {
            "total_bytes": self.total_bytes,
            "comm_time_s": self.comm_time_s,
            "flops_forward": self.flops_forward,
            "flops_backward": self.flops_backward,
            "measured_compute_s": self.measured_compute_s,
            "modeled_compute_s": self.modeled_compute_s,
            "energy_kwh": self.energy_kwh,
            "carbon_g": self.carbon_g,
        }


@dataclass(frozen=True)
class EnergyModel:
    cpu_power_w: float = 130.0
    flops_per_second: float = 5.0e10
    carbon_intensity_kg_per_kwh: float = CARBON_INTENSITY_KG_PER_KWH
    pue: float = 1.0

    def __post_init__(self):
        for name in ("cpu_power_w", "flops_per_second", "carbon_intensity_kg_per_kwh", "pue"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def calibrated(cls, **kw) -> "EnergyModel":
        return cls(pue=CALIBRATED_PUE, **kw)

    def modeled_seconds(self, flops: int) -> float:
        return flops / self.flops_per_second


def carbon_grams(kwh: float, model: EnergyModel) -> float:
    return kwh * 1000.0 * model.carbon_intensity_kg_per_kwh * model.pue


def energy_and_carbon(ledger: CostLedger, model: EnergyModel, clock: str = "modeled") -> tuple:
    """Energy (kWh) drawn over compute + communication time, and its CO2-equivalent grams."""
    compute = ledger.modeled_compute_s if clock == "modeled" else ledger.measured_compute_s
    total_s = compute + ledger.comm_time_s
    kwh = model.cpu_power_w * total_s / 3.6e6
    return kwh, carbon_grams(kwh, model)


def count_flops(graph: LayerGraph, batch: int = 1) -> tuple:
    """(forward, backward) FLOPs for one pass over ``batch`` samples; 2 FLOPs per MAC, backward = 2x forward."""
    macs = 0
    for layer in graph.layers:
        p = layer.params
        if layer.kind == "conv":
            o, h, w = graph.shape_of(layer.id)
            macs += h * w * o * int(p["kernel"]) ** 2 * int(p["in_channels"])
        elif layer.kind in ("dense", "junction"):
            macs += int(p["in_features"]) * int(p["units"])
    forward = 2 * macs * batch
    return forward, BACKWARD_FLOP_FACTOR * forward


def _samples(dataset_sizes) -> int:
    if isinstance(dataset_sizes, (int, float)):
        return int(dataset_sizes)
    return int(sum(dataset_sizes))


def predict_traffic(paradigm: ParadigmConfig, model: PlacedModel, epochs: int, dataset_sizes) -> int:
    """Closed-form network bytes for a run.

    ``dataset_sizes`` is the number of training samples (tuples for FPL/SL)
    processed per epoch, or, for CENTRAL, the per-source image counts
    shipped to the edge.  GFL ignores it.
    """
    if paradigm.kind == "GFL":
        averaged = count_parameters(model.graph, set(paradigm.averaged_layers))
        return epochs * paradigm.num_sources * 2 * BYTES_PER_PARAM * averaged
    if paradigm.kind == "CENTRAL":
        return _samples(dataset_sizes) * math.prod(model.graph.input_shape)
    n = _samples(dataset_sizes)
    return epochs * sum(2 * n * cut.width * BYTES_PER_ACTIVATION for cut in model.cut_edges)


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
