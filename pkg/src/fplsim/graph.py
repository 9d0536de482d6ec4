"""Declarative layer graphs, FPL/SL restructuring, and node placement.

A graph is an ordered tuple of :class:`LayerSpec`; declaration order is the
evaluation order.  A layer with no inputs reads the raw image of the source
named by its ``source`` hyperparameter (0 when absent).  Replicated layers
are named ``<id>#<k>`` where ``k`` is the source index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import tomli
import tomli_w

from .errors import ConfigurationError

KINDS = ("conv", "maxpool", "dense", "relu", "flatten", "junction", "concat")
PARAMETERIZED = ("conv", "dense", "junction")
JUNCTION_ID = "J"
CONCAT_ID = "concat"


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    params: Mapping = field(default_factory=dict)
    inputs: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"layer {self.id!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "params", dict(self.params))

    @property
    def base_id(self) -> str:
        return self.id.split("#", 1)[0]

    @property
    def source(self) -> int:
        return int(self.params.get("source", 0))


def clone_index(instance_id: str) -> Optional[int]:
    """Source index encoded in a replica id, or None for unreplicated layers."""
    if "#" not in instance_id:
        return None
    return int(instance_id.rsplit("#", 1)[1])


@dataclass(frozen=True)
class LayerGraph:
    layers: tuple
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 62

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "_index", {layer.id: i for i, layer in enumerate(self.layers)})
        if len(self._index) != len(self.layers):
            seen, dup = set(), None
            for layer in self.layers:
                if layer.id in seen:
                    dup = layer.id
                seen.add(layer.id)
            raise ConfigurationError(f"duplicate layer id {dup!r}")
        for i, layer in enumerate(self.layers):
            for src in layer.inputs:
                j = self._index.get(src)
                if j is None:
                    raise ConfigurationError(f"layer {layer.id!r}: unknown input {src!r}")
                if j >= i:
                    raise ConfigurationError(f"layer {layer.id!r}: input {src!r} is not declared before it")
        if self.layers:
            outputs = self.output_ids()
            if len(outputs) != 1:
                raise ConfigurationError(f"graph must have a single output layer, found {outputs}")
        object.__setattr__(self, "_shapes", self._infer_shapes())
        if self.layers and self._shapes[self.output_id] != (self.num_classes,):
            raise ConfigurationError(
                f"output layer {self.output_id!r} has shape {self._shapes[self.output_id]}, "
                f"expected ({self.num_classes},)")

    def __len__(self) -> int:
        return len(self.layers)

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._index

    def layer(self, layer_id: str) -> LayerSpec:
        try:
            return self.layers[self._index[layer_id]]
        except KeyError:
            raise ConfigurationError(f"no layer named {layer_id!r}") from None

    def output_ids(self) -> list:
        consumed = {src for layer in self.layers for src in layer.inputs}
        return [layer.id for layer in self.layers if layer.id not in consumed]

    @property
    def output_id(self) -> str:
        return self.output_ids()[0]

    @property
    def num_sources(self) -> int:
        sources = {layer.source for layer in self.layers if not layer.inputs}
        return max(sources) + 1 if sources else 0

    def edges(self) -> list:
        return [(src, layer.id) for layer in self.layers for src in layer.inputs]

    def ancestors(self, layer_id: str) -> set:
        seen, stack = set(), list(self.layer(layer_id).inputs)
        while stack:
            cur = stack.pop()
            if cur not in seen:
                seen.add(cur)
                stack.extend(self.layer(cur).inputs)
        return seen

    def shape_of(self, layer_id: str) -> tuple:
        """Per-sample output shape of a layer."""
        return self._shapes[layer_id]

    def width_of(self, layer_id: str) -> int:
        return math.prod(self._shapes[layer_id])

    def _infer_shapes(self) -> dict:
        shapes = {}
        for layer in self.layers:
            ins = [shapes[s] for s in layer.inputs]
            p = layer.params
            where = f"layer {layer.id!r}"
            if layer.kind == "conv":
                c, h, w = ins[0] if ins else self.input_shape
                if len(ins) > 1:
                    raise ConfigurationError(f"{where}: conv takes one input")
                if int(p["in_channels"]) != c:
                    raise ConfigurationError(f"{where}: declared in_channels={p['in_channels']} but upstream has C={c}")
                k = int(p["kernel"])
                if p.get("padding", "same") == "valid":
                    h, w = h - k + 1, w - k + 1
                if h < 1 or w < 1:
                    raise ConfigurationError(f"{where}: kernel {k} larger than input")
                shapes[layer.id] = (int(p["out_channels"]), h, w)
            elif layer.kind == "maxpool":
                c, h, w = ins[0] if ins else self.input_shape
                shapes[layer.id] = (c, (h + 1) // 2, (w + 1) // 2)
            elif layer.kind in ("relu", "flatten"):
                src = ins[0] if ins else self.input_shape
                shapes[layer.id] = src if layer.kind == "relu" else (math.prod(src),)
            elif layer.kind in ("dense", "junction", "concat"):
                if not ins:
                    raise ConfigurationError(f"{where}: {layer.kind} needs upstream inputs")
                if any(len(s) != 1 for s in ins):
                    raise ConfigurationError(f"{where}: inputs must be flat, got {ins}")
                total = sum(s[0] for s in ins)
                if layer.kind == "concat":
                    shapes[layer.id] = (total,)
                    continue
                if layer.kind == "dense" and len(ins) != 1:
                    raise ConfigurationError(f"{where}: dense takes one input (use concat or junction)")
                if int(p["in_features"]) != total:
                    raise ConfigurationError(
                        f"{where}: declared in_features={p['in_features']} but upstream width is {total}")
                shapes[layer.id] = (int(p["units"]),)
        return shapes


def parameter_shapes(layer: LayerSpec) -> list:
    """Shapes of the trainable tensors a layer owns, weight first."""
    p = layer.params
    if layer.kind == "conv":
        o, c, k = int(p["out_channels"]), int(p["in_channels"]), int(p["kernel"])
        return [(o, c, k, k), (o,)]
    if layer.kind == "dense":
        return [(int(p["in_features"]), int(p["units"])), (int(p["units"]),)]
    if layer.kind == "junction":
        shapes = [(int(p["in_features"]), int(p["units"]))]
        if p.get("bias", True):
            shapes.append((int(p["units"]),))
        return shapes
    return []


def layer_parameter_count(layer: LayerSpec) -> int:
    return sum(math.prod(s) for s in parameter_shapes(layer))


def count_parameters(graph: LayerGraph, layer_ids=None) -> int:
    """Total weight + bias elements; each replica instance counts separately."""
    return sum(layer_parameter_count(layer) for layer in graph.layers
               if layer_ids is None or layer.id in layer_ids)


def build_leaf_cnn(num_classes: int = 62, input_shape=(1, 28, 28)) -> LayerGraph:
    """Two conv(5x5, same) + ReLU + 2x2 max-pool blocks, then dense 2048 + ReLU, then dense num_classes."""
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    c, h, w = input_shape
    flat = 64 * (((h + 1) // 2 + 1) // 2) * (((w + 1) // 2 + 1) // 2)
    layers = [
        LayerSpec("C1", "conv", {"in_channels": c, "out_channels": 32, "kernel": 5, "padding": "same"}),
        LayerSpec("C1/relu", "relu", inputs=("C1",)),
        LayerSpec("C1/pool", "maxpool", inputs=("C1/relu",)),
        LayerSpec("C2", "conv", {"in_channels": 32, "out_channels": 64, "kernel": 5, "padding": "same"}, ("C1/pool",)),
        LayerSpec("C2/relu", "relu", inputs=("C2",)),
        LayerSpec("C2/pool", "maxpool", inputs=("C2/relu",)),
        LayerSpec("flatten", "flatten", inputs=("C2/pool",)),
        LayerSpec("F1", "dense", {"in_features": flat, "units": 2048}, ("flatten",)),
        LayerSpec("F1/relu", "relu", inputs=("F1",)),
        LayerSpec("F2", "dense", {"in_features": 2048, "units": num_classes}, ("F1/relu",)),
    ]
    return LayerGraph(layers, input_shape, num_classes)


def _replicate(graph: LayerGraph, num_sources: int, before: str):
    """Clone everything strictly upstream of ``before`` once per source.

    Returns (clone layers, ids of clone outputs feeding ``before``, upstream id set).
    """
    if num_sources < 1:
        raise ConfigurationError(f"num_sources must be >= 1, got {num_sources}")
    target = graph.layer(before)
    if target.kind != "dense":
        raise ConfigurationError(f"split point {before!r} must be a dense layer, got {target.kind}")
    upstream = graph.ancestors(before)
    if not upstream:
        raise ConfigurationError(f"nothing upstream of {before!r} to replicate")
    if graph.num_sources > 1 or any(clone_index(i) is not None for i in upstream):
        raise ConfigurationError("graph is already replicated")
    for layer in graph.layers:
        if layer.id not in upstream and layer.id != before:
            leaked = [s for s in layer.inputs if s in upstream]
            if leaked:
                raise ConfigurationError(f"layer {layer.id!r} consumes replicated layer(s) {leaked} besides {before!r}")
    clones = []
    for k in range(num_sources):
        for layer in graph.layers:
            if layer.id not in upstream:
                continue
            params = dict(layer.params)
            if not layer.inputs:
                params["source"] = k
            clones.append(LayerSpec(f"{layer.id}#{k}", layer.kind, params, tuple(f"{s}#{k}" for s in layer.inputs)))
    feeders = [f"{s}#{k}" for k in range(num_sources) for s in target.inputs]
    return clones, feeders, upstream


def apply_fpl(graph: LayerGraph, num_sources: int, junction_before: str, junction_bias: bool = True) -> LayerGraph:
    """Replicate the layers upstream of ``junction_before`` and merge them through a junction layer J.

    J is linear (no activation); its input width is the sum of the replica
    output widths and its output width is the declared input width of
    ``junction_before``, so the downstream layers are untouched.
    """
    clones, feeders, upstream = _replicate(graph, num_sources, junction_before)
    target = graph.layer(junction_before)
    in_width = num_sources * sum(graph.width_of(s) for s in target.inputs)
    junction = LayerSpec(JUNCTION_ID, "junction",
                         {"in_features": in_width, "units": int(target.params["in_features"]), "bias": junction_bias},
                         tuple(feeders))
    rest = [LayerSpec(l.id, l.kind, l.params, (JUNCTION_ID,) if l.id == junction_before else l.inputs)
            for l in graph.layers if l.id not in upstream]
    return LayerGraph(clones + [junction] + rest, graph.input_shape, graph.num_classes)


def apply_sl_vertical(graph: LayerGraph, num_sources: int, split_before: str = "F1") -> LayerGraph:
    """Vertical-partition split learning: replicate the lower stack, concatenate, widen ``split_before``."""
    clones, feeders, upstream = _replicate(graph, num_sources, split_before)
    target = graph.layer(split_before)
    width = num_sources * sum(graph.width_of(s) for s in target.inputs)
    rest = []
    for layer in graph.layers:
        if layer.id in upstream:
            continue
        if layer.id == split_before:
            layer = LayerSpec(layer.id, layer.kind, {**layer.params, "in_features": width}, (CONCAT_ID,))
        rest.append(layer)
    return LayerGraph(clones + [LayerSpec(CONCAT_ID, "concat", {}, tuple(feeders))] + rest,
                      graph.input_shape, graph.num_classes)


def without_junction(graph: LayerGraph) -> LayerGraph:
    """Replace J by plain concatenation feeding a widened successor (the SL form of an FPL graph)."""
    junction = graph.layer(JUNCTION_ID)
    width = int(junction.params["in_features"])
    layers = []
    for layer in graph.layers:
        if layer.id == JUNCTION_ID:
            if len(layer.inputs) > 1:
                layers.append(LayerSpec(CONCAT_ID, "concat", {}, layer.inputs))
            continue
        if JUNCTION_ID in layer.inputs:
            new_in = (CONCAT_ID,) if len(junction.inputs) > 1 else junction.inputs
            layer = LayerSpec(layer.id, layer.kind, {**layer.params, "in_features": width}, new_in)
        layers.append(layer)
    return LayerGraph(layers, graph.input_shape, graph.num_classes)


def replicated_count(graph: LayerGraph, num_sources: int, before: str) -> int:
    """Parameter count of ``num_sources`` copies of the layers upstream of ``before`` plus one copy of the rest."""
    upstream = graph.ancestors(before)
    return num_sources * count_parameters(graph, upstream) + count_parameters(
        graph, {l.id for l in graph.layers if l.id not in upstream})


# ---------------------------------------------------------------- placement

@dataclass(frozen=True)
class CutEdge:
    producer: str
    consumer: str
    src_node: str
    dst_node: str
    width: int


@dataclass(frozen=True)
class PlacedModel:
    graph: LayerGraph
    placement: Mapping
    replicas: Mapping
    cut_edges: tuple

    @property
    def nodes(self) -> list:
        return sorted(set(self.placement.values()))

    def layers_on(self, node: str) -> list:
        return [l.id for l in self.graph.layers if self.placement[l.id] == node]


def place(graph: LayerGraph, assignment: Mapping) -> PlacedModel:
    missing = [l.id for l in graph.layers if l.id not in assignment]
    if missing:
        raise ConfigurationError(f"unassigned layer instance(s): {missing}")
    extra = sorted(set(assignment) - {l.id for l in graph.layers})
    if extra:
        raise ConfigurationError(f"assignment names unknown layer(s): {extra}")
    replicas: dict = {}
    for layer in graph.layers:
        replicas.setdefault(layer.base_id, []).append(layer.id)
    cuts = tuple(CutEdge(src, dst, assignment[src], assignment[dst], graph.width_of(src))
                 for src, dst in graph.edges() if assignment[src] != assignment[dst])
    return PlacedModel(graph, dict(assignment), {k: tuple(v) for k, v in replicas.items()}, cuts)


def source_node(k: int) -> str:
    return f"source{k}"


EDGE_NODE = "edge"


def default_placement(graph: LayerGraph, edge_node: str = EDGE_NODE) -> PlacedModel:
    """Replicas ``<id>#k`` on ``source<k>``; every shared layer on the edge server."""
    assignment = {}
    for layer in graph.layers:
        k = clone_index(layer.id)
        assignment[layer.id] = edge_node if k is None else source_node(k)
    return place(graph, assignment)


def single_node_placement(graph: LayerGraph, node: str) -> PlacedModel:
    return place(graph, {l.id: node for l in graph.layers})


# ------------------------------------------------------------ serialization

def graph_to_dict(graph: LayerGraph) -> dict:
    return {
        "input_shape": list(graph.input_shape),
        "num_classes": graph.num_classes,
        "layers": [{"id": l.id, "kind": l.kind, "inputs": list(l.inputs), "params": dict(l.params)}
                   for l in graph.layers],
    }


def graph_from_dict(data: Mapping) -> LayerGraph:
    try:
        layers = [LayerSpec(d["id"], d["kind"], d.get("params", {}), tuple(d.get("inputs", ())))
                  for d in data.get("layers", [])]
        return LayerGraph(layers, tuple(data.get("input_shape", (1, 28, 28))), int(data.get("num_classes", 62)))
    except KeyError as exc:
        raise ConfigurationError(f"architecture entry missing field {exc}") from None


def save_graph(graph: LayerGraph, path) -> None:
    Path(path).write_text(tomli_w.dumps(graph_to_dict(graph)))


def load_graph(path) -> LayerGraph:
    with open(path, "rb") as fh:
        return graph_from_dict(tomli.load(fh))
