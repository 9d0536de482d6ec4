"""Simulator for federated parallel learning (FPL) against split, federated and centralized training."""
from .data import ImageSet, TransformSpec, load_emnist, load_idx, shard, synthetic_glyphs, transform
from .engine import Network, TrainResult, detect_convergence, evaluate, train
from .errors import (ConfigurationError, DataError, DomainError, FplsimError, IngestionError, UsageError)
from .graph import (LayerGraph, LayerSpec, PlacedModel, apply_fpl, apply_sl_vertical, build_leaf_cnn,
                    count_parameters, default_placement, place)
from .metrics import CostLedger, EnergyModel, count_flops, predict_traffic
from .netsim import LinkModel, expected_rate, place_nodes, simulate_transfers
from .strategy import ParadigmConfig, build_structure, reference_strategies
from .tensor import Parameter, Tape, Tensor, adam_step, average_parameters

__version__ = "0.1.0"
