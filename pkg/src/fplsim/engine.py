"""Training runs under FPL, generalized FL, split learning and centralized transfer.

All four paradigms share one loop shape: per epoch, run local optimisation
(ADAM on softmax cross-entropy), charge every byte that crosses the network
to the run's :class:`CostLedger`, evaluate validation loss, and stop once
the loss has not improved for ``patience`` epochs.  The parameters of the
best epoch are restored before the test evaluation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import ImageSet, align_views, stratified_split
from .errors import ConfigurationError
from .graph import EDGE_NODE, LayerGraph, PlacedModel, count_parameters, parameter_shapes, source_node
from .metrics import (BYTES_PER_ACTIVATION, BYTES_PER_PARAM, CostLedger, EnergyModel, count_flops,
                      energy_and_carbon, predict_traffic)
from .netsim import Flow, LinkModel, NodePlacement, place_nodes, simulate_transfers
from .rng import derive_rng
from .strategy import ParadigmConfig
from .tensor import (DTYPE, Parameter, Tape, Tensor, adam_step, add, concat, conv2d, dense, flatten,
                     average_parameters, glorot_uniform, maxpool2, proximal_term, relu, softmax_cross_entropy)

EVAL_BATCH = 256


# ------------------------------------------------------------------ runtime

def _fans(layer, shape) -> tuple:
    if layer.kind == "conv":
        o, c, k, _ = shape
        return c * k * k, o * k * k
    return shape[0], shape[1]


class Network:
    """Parameters for every parameterized layer of a graph plus a forward evaluator.

    ``init_key`` maps a layer id to the key its initial weights are drawn
    under, so two networks agree on a layer exactly when their keys agree.
    """

    def __init__(self, graph: LayerGraph, seed: int, init_key=None):
        self.graph = graph
        init_key = init_key or (lambda layer_id: layer_id)
        self.params: dict = {}
        for layer in graph.layers:
            shapes = parameter_shapes(layer)
            if not shapes:
                continue
            rng = derive_rng(seed, "init", init_key(layer.id))
            weight = glorot_uniform(shapes[0], *_fans(layer, shapes[0]), rng)
            self.params[layer.id] = [Parameter(weight)] + [Parameter(np.zeros(s, dtype=DTYPE)) for s in shapes[1:]]

    def parameters(self, layer_ids=None) -> list:
        return [p for lid, ps in self.params.items() if layer_ids is None or lid in layer_ids for p in ps]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, inputs: Sequence[np.ndarray], tape: Optional[Tape] = None):
        """Evaluate the graph on per-source image batches; returns (logits, activations by layer id)."""
        acts: dict = {}
        for layer in self.graph.layers:
            ins = [acts[s] for s in layer.inputs] or [Tensor(inputs[layer.source])]
            ps = self.params.get(layer.id)
            kind = layer.kind
            if kind == "conv":
                out = conv2d(ins[0], ps[0], ps[1], layer.params.get("padding", "same"), tape)
            elif kind == "maxpool":
                out = maxpool2(ins[0], tape)
            elif kind == "relu":
                out = relu(ins[0], tape)
            elif kind == "flatten":
                out = flatten(ins[0], tape)
            elif kind == "concat":
                out = concat(ins, tape)
            elif kind == "dense":
                out = dense(ins[0], ps[0], ps[1], tape)
            else:  # junction: linear map of the concatenated branch outputs
                x = concat(ins, tape) if len(ins) > 1 else ins[0]
                bias = ps[1] if len(ps) > 1 else Tensor(np.zeros(ps[0].shape[1], dtype=DTYPE))
                out = dense(x, ps[0], bias, tape)
            acts[layer.id] = out
        return acts[self.graph.output_id], acts

    def state(self) -> dict:
        return {lid: [p.data.copy() for p in ps] for lid, ps in self.params.items()}

    def load_state(self, state: dict) -> None:
        for lid, arrays in state.items():
            for p, a in zip(self.params[lid], arrays):
                p.value.data[...] = a


def evaluate(net: Network, inputs: Sequence[np.ndarray], labels: np.ndarray) -> tuple:
    """(mean cross-entropy, accuracy) over a dataset, in fixed-size batches."""
    n = len(labels)
    if n == 0:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for start in range(0, n, EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        logits, _ = net.forward([x[sl] for x in inputs])
        total += softmax_cross_entropy(logits, labels[sl]).item() * len(labels[sl])
        correct += int((logits.data.argmax(axis=1) == labels[sl]).sum())
    return total / n, correct / n


def detect_convergence(loss_curve: Sequence[float], patience: int) -> Optional[int]:
    """Best epoch once the validation loss has gone ``patience`` epochs without a new minimum, else None."""
    if patience < 1:
        raise ConfigurationError("patience must be >= 1")
    if not loss_curve:
        return None
    best = int(np.argmin(loss_curve))
    return best if len(loss_curve) - 1 - best >= patience else None


# ---------------------------------------------------------- communication

class CommModel:
    """Turns per-node byte transfers into PF-scheduled delays; results are memoised per transfer pattern."""

    def __init__(self, link: LinkModel, placement: NodePlacement, seed: int = 0):
        self.link = link
        self.placement = placement
        self.seed = seed
        self._cache: dict = {}

    def delay(self, transfers: Sequence[tuple]) -> float:
        """Completion time (s) of concurrent (src, dst, bytes) transfers."""
        key = tuple(sorted(transfers))
        if key not in self._cache:
            flows = [Flow(f"f{i}", s, d, b) for i, (s, d, b) in enumerate(key)]
            done = simulate_transfers(flows, self.link, self.placement, self.seed)
            self._cache[key] = max(done.values(), default=0.0)
        return self._cache[key]


@dataclass
class NodeState:
    node_id: str
    network: Network
    train: ImageSet
    val: ImageSet
    test: Optional[ImageSet] = None
    anchor: dict = field(default_factory=dict)  # last broadcast global values of averaged layers


@dataclass
class TrainResult:
    strategy: str
    loss_curve: list
    best_epoch: int
    test_accuracy: float
    ledger: CostLedger
    num_parameters: int
    train_samples: int
    predicted_bytes: int
    node_accuracies: list = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.loss_curve)

    @property
    def train_time_s(self) -> float:
        return self.ledger.modeled_compute_s + self.ledger.comm_time_s


# -------------------------------------------------------------- primitives

def _adam_all(params, cfg: ParadigmConfig) -> None:
    for p in params:
        if p.grad is not None:
            adam_step(p, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def split_step(model: PlacedModel, net: Network, inputs: Sequence[np.ndarray], labels: np.ndarray,
               cfg: ParadigmConfig, ledger: Optional[CostLedger] = None, comm: Optional[CommModel] = None,
               epoch: int = 0) -> float:
    """One forward/backward pass of a model split over nodes, then one ADAM step on every parameter.

    Each cut edge carries ``batch * width * 4`` bytes of activations
    producer -> consumer and the same volume of gradients back.
    """
    tape = Tape()
    logits, _ = net.forward(inputs, tape)
    loss = softmax_cross_entropy(logits, labels, tape)
    tape.backward(loss)
    _adam_all(net.parameters(), cfg)
    if ledger is not None:
        b = len(labels)
        up = [(c.src_node, c.dst_node, b * c.width * BYTES_PER_ACTIVATION) for c in model.cut_edges]
        down = [(c.dst_node, c.src_node, b * c.width * BYTES_PER_ACTIVATION) for c in model.cut_edges]
        ledger.log_bytes(epoch, "activations", sum(x[2] for x in up), comm.delay(up) if comm and up else 0.0)
        ledger.log_bytes(epoch, "gradients", sum(x[2] for x in down), comm.delay(down) if comm and down else 0.0)
    return loss.item()


def local_step(node: NodeState, images: np.ndarray, labels: np.ndarray, cfg: ParadigmConfig,
               averaged_layers: Sequence[str]) -> float:
    """One ADAM step on a node's private model; FedProx adds (mu/2)||w - w_global||^2 per averaged tensor."""
    tape = Tape()
    logits, _ = node.network.forward([images], tape)
    ce = softmax_cross_entropy(logits, labels, tape)
    total = ce
    if cfg.aggregator == "FedProx":
        for lid in averaged_layers:
            for p, anchor in zip(node.network.params[lid], node.anchor[lid]):
                total = add(total, proximal_term(p, anchor, cfg.fedprox_mu, tape), tape)
    tape.backward(total)
    _adam_all(node.network.parameters(), cfg)
    return ce.item()


def gfl_round(nodes: Sequence[NodeState], averaged_layers: Sequence[str], aggregator: str = "FedAvg",
              mu: float = 0.0) -> Sequence[NodeState]:
    """Uniformly average every averaged layer across nodes and broadcast the result.

    The aggregation itself is the same for FedAvg and FedProx; FedProx
    differs in the local objective, whose anchor is the broadcast value set here.
    """
    for lid in averaged_layers:
        missing = [n.node_id for n in nodes if lid not in n.network.params]
        if missing:
            raise ConfigurationError(f"layer {lid!r} absent on node(s) {missing}")
        arity = len(nodes[0].network.params[lid])
        merged = [average_parameters([n.network.params[lid][i] for n in nodes]) for i in range(arity)]
        for n in nodes:
            for p, value in zip(n.network.params[lid], merged):
                p.value.data[...] = value
            n.anchor[lid] = [m.copy() for m in merged]
    return nodes


def _batches(n: int, batch_size: int, seed: int, stream: str, epoch: int):
    order = derive_rng(seed, "shuffle", stream, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ------------------------------------------------------------------- train

def _split_views(shards: Sequence[ImageSet], cfg: ParadigmConfig, seed: int) -> tuple:
    """Stratified train/validation split of each source's shard (shared indices in overlapping mode)."""
    trains, vals = [], []
    shared = stratified_split(shards[0].labels, cfg.validation_fraction, seed, key="val/0")
    for k, s in enumerate(shards):
        if cfg.overlapping_views or k == 0:
            rest, held = shared
        else:
            rest, held = stratified_split(s.labels, cfg.validation_fraction, seed, key=f"val/{k}")
        trains.append(s.subset(rest))
        vals.append(s.subset(held))
    return trains, vals


def _tuples(views: Sequence[ImageSet], seed: int, overlapping: bool, key: str):
    idx = align_views(views, derive_rng(seed, "align", key).integers(2**31), overlapping)
    inputs = [v.images[i] for v, i in zip(views, idx)]
    labels = views[0].labels[idx[0]] if len(idx[0]) else np.zeros(0, dtype=np.int64)
    return inputs, labels


def _empty_like(s: ImageSet) -> ImageSet:
    return ImageSet(s.images[:0], s.labels[:0])


def train(model: PlacedModel, config: ParadigmConfig, shards: Sequence[ImageSet], netsim: LinkModel,
          seed: int, test: Optional[Sequence[ImageSet]] = None, energy: Optional[EnergyModel] = None,
          placement: Optional[NodePlacement] = None) -> TrainResult:
    """Train ``model`` under ``config`` on per-source training ``shards``; evaluate on per-source ``test`` views."""
    cfg = config
    energy = energy or EnergyModel()
    test = list(test) if test is not None else [_empty_like(s) for s in shards]
    if cfg.kind in ("FPL", "SL", "GFL") and len(shards) != cfg.num_sources:
        raise ConfigurationError(f"{cfg.kind} needs {cfg.num_sources} shards, got {len(shards)}")
    if cfg.kind in ("FPL", "SL") and model.graph.num_sources != len(shards):
        raise ConfigurationError(f"model has {model.graph.num_sources} source replicas but {len(shards)} shards")
    if len(test) != len(shards):
        raise ConfigurationError(f"{len(test)} test views for {len(shards)} shards")
    placement = placement or place_nodes(max(cfg.num_sources, len(shards)), netsim.cell_radius_m, seed)
    comm = CommModel(netsim, placement, seed)
    runner = {"FPL": _train_split, "SL": _train_split, "CENTRAL": _train_central, "GFL": _train_gfl}[cfg.kind]
    return runner(model, cfg, shards, test, comm, energy, seed)


def _finish(strategy, curve, best, acc, ledger, energy, nparams, samples, predicted, node_acc=()) -> TrainResult:
    ledger.energy_kwh, ledger.carbon_g = energy_and_carbon(ledger, energy)
    return TrainResult(strategy, list(curve), best, acc, ledger, nparams, samples, predicted, list(node_acc))


def _epoch_loop(cfg: ParadigmConfig, run_epoch, validate, snapshot, restore) -> tuple:
    curve, best_state, best = [], None, -1
    for epoch in range(cfg.max_epochs):
        run_epoch(epoch)
        curve.append(validate(epoch))
        if best < 0 or curve[-1] < curve[best]:
            best, best_state = epoch, snapshot()
        if detect_convergence(curve, cfg.patience) is not None:
            break
    if best_state is not None:
        restore(best_state)
    return curve, best


def _train_split(model, cfg, shards, test, comm, energy, seed) -> TrainResult:
    ledger = CostLedger()
    net = Network(model.graph, seed)
    trains, vals = _split_views(shards, cfg, seed)
    x_tr, y_tr = _tuples(trains, seed, cfg.overlapping_views, "train")
    x_va, y_va = _tuples(vals, seed, cfg.overlapping_views, "val")
    x_te, y_te = _tuples(test, seed, cfg.overlapping_views, "test")
    fwd1, bwd1 = count_flops(model.graph, 1)

    def run_epoch(epoch):
        t0 = time.perf_counter()
        for idx in _batches(len(y_tr), cfg.batch_size, seed, "tuples", epoch):
            split_step(model, net, [x[idx] for x in x_tr], y_tr[idx], cfg, ledger, comm, epoch)
            ledger.log_flops(epoch, fwd1 * len(idx), bwd1 * len(idx))
        ledger.measured_compute_s += time.perf_counter() - t0

    def validate(epoch):
        ledger.log_flops(epoch, fwd1 * len(y_va))
        return evaluate(net, x_va, y_va)[0]

    curve, best = _epoch_loop(cfg, run_epoch, validate, net.state, net.load_state)
    ledger.modeled_compute_s = energy.modeled_seconds(ledger.flops_forward + ledger.flops_backward)
    acc = evaluate(net, x_te, y_te)[1]
    predicted = predict_traffic(cfg, model, len(curve), len(y_tr))
    return _finish(cfg.name, curve, best, acc, ledger, energy, count_parameters(model.graph), len(y_tr), predicted)


def _train_central(model, cfg, shards, test, comm, energy, seed) -> TrainResult:
    ledger = CostLedger()
    pixels = int(np.prod(model.graph.input_shape))
    shipped = [(source_node(k), EDGE_NODE, len(s) * pixels) for k, s in enumerate(shards)]
    ledger.log_bytes(0, "image_transfer", sum(b for _, _, b in shipped), comm.delay(shipped))
    trains, vals = _split_views(shards, cfg, seed)
    pool = lambda sets: (np.concatenate([s.images for s in sets]), np.concatenate([s.labels for s in sets]))
    x_tr, y_tr = pool(trains)
    x_va, y_va = pool(vals)
    x_te, y_te = pool(test)
    net = Network(model.graph, seed)
    fwd1, bwd1 = count_flops(model.graph, 1)

    def run_epoch(epoch):
        t0 = time.perf_counter()
        for idx in _batches(len(y_tr), cfg.batch_size, seed, "0", epoch):
            tape = Tape()
            logits, _ = net.forward([x_tr[idx]], tape)
            tape.backward(softmax_cross_entropy(logits, y_tr[idx], tape))
            _adam_all(net.parameters(), cfg)
            ledger.log_flops(epoch, fwd1 * len(idx), bwd1 * len(idx))
        ledger.measured_compute_s += time.perf_counter() - t0

    def validate(epoch):
        ledger.log_flops(epoch, fwd1 * len(y_va))
        return evaluate(net, [x_va], y_va)[0]

    curve, best = _epoch_loop(cfg, run_epoch, validate, net.state, net.load_state)
    ledger.modeled_compute_s = energy.modeled_seconds(ledger.flops_forward + ledger.flops_backward)
    acc = evaluate(net, [x_te], y_te)[1]
    predicted = predict_traffic(cfg, model, len(curve), [len(s) for s in shards])
    return _finish(cfg.name, curve, best, acc, ledger, energy, count_parameters(model.graph), len(y_tr), predicted)


def _train_gfl(model, cfg, shards, test, comm, energy, seed) -> TrainResult:
    ledger = CostLedger()
    graph = model.graph
    averaged = tuple(cfg.averaged_layers)
    missing = [l for l in averaged if not parameter_shapes(graph.layer(l))]
    if missing:
        raise ConfigurationError(f"averaged_layers: {missing} carry no parameters")
    trains, vals = _split_views(shards, cfg, seed)
    nodes = []
    for k in range(cfg.num_sources):
        # averaged layers start from a seed all nodes share, so no initial broadcast is needed
        key = lambda lid, k=k: lid if lid in averaged else f"{lid}@{source_node(k)}"
        net = Network(graph, seed, key)
        node = NodeState(source_node(k), net, trains[k], vals[k], test[k])
        node.anchor = {lid: [p.data.copy() for p in net.params[lid]] for lid in averaged}
        nodes.append(node)
    fwd1, bwd1 = count_flops(graph, 1)
    sync_bytes = BYTES_PER_PARAM * count_parameters(graph, set(averaged))

    def run_epoch(epoch):
        t0 = time.perf_counter()
        for k, node in enumerate(nodes):
            for idx in _batches(len(node.train), cfg.batch_size, seed, str(k), epoch):
                local_step(node, node.train.images[idx], node.train.labels[idx], cfg, averaged)
                ledger.log_flops(epoch, fwd1 * len(idx), bwd1 * len(idx))
        gfl_round(nodes, averaged, cfg.aggregator, cfg.mu)
        ledger.measured_compute_s += time.perf_counter() - t0
        up = [(n.node_id, EDGE_NODE, sync_bytes) for n in nodes]
        down = [(EDGE_NODE, n.node_id, sync_bytes) for n in nodes]
        ledger.log_bytes(epoch, "params_up", sync_bytes * len(nodes), comm.delay(up))
        ledger.log_bytes(epoch, "params_down", sync_bytes * len(nodes), comm.delay(down))

    def validate(epoch):
        losses = []
        for node in nodes:
            ledger.log_flops(epoch, fwd1 * len(node.val))
            losses.append(evaluate(node.network, [node.val.images], node.val.labels)[0])
        return float(np.mean(losses))

    snapshot = lambda: [n.network.state() for n in nodes]

    def restore(states):
        for n, s in zip(nodes, states):
            n.network.load_state(s)

    curve, best = _epoch_loop(cfg, run_epoch, validate, snapshot, restore)
    ledger.modeled_compute_s = energy.modeled_seconds(ledger.flops_forward + ledger.flops_backward)
    node_acc = [evaluate(n.network, [n.test.images], n.test.labels)[1] for n in nodes]
    nparams = sum(n.network.num_parameters() for n in nodes)
    predicted = predict_traffic(cfg, model, len(curve), [len(n.train) for n in nodes])
    return _finish(cfg.name, curve, best, float(np.mean(node_acc)), ledger, energy, nparams,
                   sum(len(n.train) for n in nodes), predicted, node_acc)
