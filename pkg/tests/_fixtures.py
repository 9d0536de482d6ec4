"""Small graphs and datasets that keep training tests fast."""
from fplsim.data import synthetic_glyphs
from fplsim.graph import LayerGraph, LayerSpec


def tiny_cnn(num_classes: int = 10) -> LayerGraph:
    """Same layer ids and topology as the LEAF CNN, with narrow layers."""
    return LayerGraph([
        LayerSpec("C1", "conv", {"in_channels": 1, "out_channels": 4, "kernel": 5, "padding": "same"}),
        LayerSpec("C1/relu", "relu", inputs=("C1",)),
        LayerSpec("C1/pool", "maxpool", inputs=("C1/relu",)),
        LayerSpec("C2", "conv", {"in_channels": 4, "out_channels": 8, "kernel": 5, "padding": "same"}, ("C1/pool",)),
        LayerSpec("C2/relu", "relu", inputs=("C2",)),
        LayerSpec("C2/pool", "maxpool", inputs=("C2/relu",)),
        LayerSpec("flatten", "flatten", inputs=("C2/pool",)),
        LayerSpec("F1", "dense", {"in_features": 8 * 7 * 7, "units": 32}, ("flatten",)),
        LayerSpec("F1/relu", "relu", inputs=("F1",)),
        LayerSpec("F2", "dense", {"in_features": 32, "units": num_classes}, ("F1/relu",)),
    ], (1, 28, 28), num_classes)


def wide_mlp(num_classes: int = 62) -> LayerGraph:
    """flatten -> dense 2048 -> relu -> dense; its F1 output width matches the LEAF CNN."""
    return LayerGraph([
        LayerSpec("flatten", "flatten"),
        LayerSpec("F1", "dense", {"in_features": 784, "units": 2048}, ("flatten",)),
        LayerSpec("F1/relu", "relu", inputs=("F1",)),
        LayerSpec("F2", "dense", {"in_features": 2048, "units": num_classes}, ("F1/relu",)),
    ], (1, 28, 28), num_classes)


def glyph_split(n_train: int, n_test: int, num_classes: int = 10, seed: int = 1):
    """Train and test sets drawn from one set of class prototypes."""
    data = synthetic_glyphs(n_train + n_test, num_classes, seed)
    return data.subset(range(n_train)), data.subset(range(n_train, n_train + n_test))
