"""Paradigm settings and the model structure each paradigm trains."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigurationError
from .graph import (EDGE_NODE, LayerGraph, PlacedModel, apply_fpl, apply_sl_vertical, default_placement,
                    single_node_placement, source_node)

KINDS = ("FPL", "GFL", "SL", "CENTRAL")
AGGREGATORS = ("FedAvg", "FedProx")


@dataclass(frozen=True)
class ParadigmConfig:
    kind: str
    junction_before: str | None = None
    averaged_layers: tuple = ()
    aggregator: str = "FedProx"
    fedprox_mu: float = 0.01
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 3
    num_sources: int = 5
    split_before: str = "F1"
    junction_bias: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    validation_fraction: float = 0.1
    overlapping_views: bool = False
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "averaged_layers", tuple(self.averaged_layers))
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind: expected one of {KINDS}, got {self.kind!r}")
        if self.kind == "FPL" and not self.junction_before:
            raise ConfigurationError("junction_before: required for FPL")
        if self.kind == "GFL" and not self.averaged_layers:
            raise ConfigurationError("averaged_layers: GFL needs at least one averaged layer")
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"aggregator: expected one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.fedprox_mu < 0:
            raise ConfigurationError("fedprox_mu: must be nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size: must be >= 1")
        if self.max_epochs < 0:
            raise ConfigurationError("max_epochs: must be >= 0")
        if self.patience < 1:
            raise ConfigurationError("patience: must be >= 1")
        if self.num_sources < 1:
            raise ConfigurationError("num_sources: must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction: must be in [0, 1)")

    @property
    def name(self) -> str:
        if self.kind == "FPL":
            return f"FPL:J->{self.junction_before}"
        if self.kind == "GFL":
            return "GFL:" + "/".join(self.averaged_layers)
        return self.kind

    @property
    def mu(self) -> float:
        return self.fedprox_mu if self.aggregator == "FedProx" else 0.0


def build_structure(config: ParadigmConfig, base: LayerGraph) -> PlacedModel:
    """Placed model for a paradigm.

    FPL/SL: replicas on ``source<k>``, shared layers on the edge server.
    CENTRAL: the base graph on the edge server (images are shipped there).
    GFL: the base graph on ``source0``; it is the per-node template each
    node instantiates with its own parameters.
    """
    if config.kind == "FPL":
        return default_placement(apply_fpl(base, config.num_sources, config.junction_before, config.junction_bias))
    if config.kind == "SL":
        return default_placement(apply_sl_vertical(base, config.num_sources, config.split_before))
    if config.kind == "CENTRAL":
        return single_node_placement(base, EDGE_NODE)
    missing = [l for l in config.averaged_layers if l not in base]
    if missing:
        raise ConfigurationError(f"averaged_layers: unknown layer(s) {missing}")
    return single_node_placement(base, source_node(0))


def reference_strategies(**overrides) -> list:
    """The six reference strategies, in reporting order."""
    return [
        ParadigmConfig("SL", **overrides),
        ParadigmConfig("CENTRAL", **overrides),
        ParadigmConfig("GFL", averaged_layers=("F1", "F2"), **overrides),
        ParadigmConfig("GFL", averaged_layers=("C2", "F1", "F2"), **overrides),
        ParadigmConfig("FPL", junction_before="F2", **overrides),
        ParadigmConfig("FPL", junction_before="F1", **overrides),
    ]
