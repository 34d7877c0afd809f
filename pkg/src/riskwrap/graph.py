"""Feature-extractor split, reinitialized clones, mirrored decoders."""

from __future__ import annotations

import json

import numpy as np

from .errors import UnsupportedLayerError
from .nn import Layer, SequentialModel, model_from_specs


class FeatureExtractor(SequentialModel):
    """Model prefix whose layers (and therefore parameters) alias the source model."""

    @property
    def feature_dim(self) -> int:
        return self.output_dim


def split_feature_extractor(model: SequentialModel, split_index: int | None = None):
    """Split ``model`` into ``(extractor, head)`` sharing the same layer objects.

    The default split keeps every layer but the last in the extractor.
    """
    n = len(model)
    if split_index is None:
        if n < 2:
            raise ValueError("single-layer model has no default feature-extractor split")
        split_index = n - 1
    if not 1 <= split_index <= n - 1:
        raise ValueError(f"split_index must lie in [1, {n - 1}], got {split_index}")
    return FeatureExtractor(model.layers[:split_index]), SequentialModel(model.layers[split_index:])


def clone_reinitialized(model: SequentialModel, seed: int) -> SequentialModel:
    """Same architecture, fresh parameters drawn under ``seed``."""
    return model_from_specs(model.specs()).initialize(seed)


def copy_model(model: SequentialModel) -> SequentialModel:
    clone = model_from_specs(model.specs())
    for src, dst in zip(model.layers, clone.layers):
        if src.has_params:
            dst.weight = type(src.weight)(src.weight.data.copy(), requires_grad=True)
            dst.bias = type(src.bias)(src.bias.data.copy(), requires_grad=True)
    return clone


def mirror_decoder(extractor: SequentialModel, latent_dim: int, seed: int = 0) -> SequentialModel:
    """Decoder running the extractor's dense widths in reverse.

    Widths go ``latent -> d_k -> ... -> d_0``; when ``latent == d_k`` the
    leading map is dropped.  Relu separates layers and the output is linear.
    Dropout layers are skipped.
    """
    if latent_dim < 1:
        raise ValueError("latent_dim must be positive")
    dims: list[int] = []
    for i, layer in enumerate(extractor.layers):
        if layer.kind == "dense":
            if not dims:
                dims.append(layer.in_dim)
            dims.append(layer.out_dim)
        elif layer.kind not in ("relu", "dropout"):
            raise UnsupportedLayerError(f"cannot mirror layer {i} of kind {layer.kind!r}")
    if not dims:
        raise UnsupportedLayerError("extractor has no dense layer to mirror")
    widths = [latent_dim] + dims[::-1]
    if widths[0] == widths[1]:
        widths = widths[1:]
    if len(widths) < 2:
        raise UnsupportedLayerError("mirrored decoder would be empty")
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Layer("dense", a, b))
        if i < len(widths) - 2:
            layers.append(Layer("relu", b, b))
    return SequentialModel(layers).initialize(seed)


def architecture_json(model: SequentialModel) -> str:
    return json.dumps({"layers": model.specs()}, sort_keys=True)


def model_from_architecture(text: str) -> SequentialModel:
    return model_from_specs(json.loads(text)["layers"])


def dense_widths(model: SequentialModel) -> list[int]:
    widths: list[int] = []
    for layer in model.layers:
        if layer.has_params:
            if not widths:
                widths.append(layer.in_dim)
            widths.append(layer.out_dim)
    return widths


def same_parameters(a: SequentialModel, b: SequentialModel) -> bool:
    pa, pb = a.parameters(), b.parameters()
    return len(pa) == len(pb) and all(np.array_equal(x.data, y.data) for x, y in zip(pa, pb))
