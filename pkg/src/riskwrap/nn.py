"""Layers, sequential models, forward passes and the parameter checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, check_finite, parameter
from .errors import NonFiniteError, ShapeError

LAYER_KINDS = ("dense", "relu", "dropout", "softmax-output")
PARAMETRIC = ("dense", "softmax-output")


@dataclass(eq=False)
class Layer:
    """One layer of a sequential model.

    ``softmax-output`` is a dense map followed by a row softmax, so a
    classifier's final layer carries the logit weights itself.
    """

    kind: str
    in_dim: int
    out_dim: int
    dropout_rate: float = 0.0
    weight: Tensor | None = None
    bias: Tensor | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")
        if self.kind not in PARAMETRIC and self.in_dim != self.out_dim:
            raise ValueError(f"{self.kind} layer must preserve its width")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAMETRIC

    def init_params(self, rng: np.random.Generator) -> None:
        if not self.has_params:
            return
        limit = np.sqrt(6.0 / (self.in_dim + self.out_dim))
        self.weight = parameter(rng.uniform(-limit, limit, size=(self.in_dim, self.out_dim)))
        self.bias = parameter(np.zeros(self.out_dim))

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias] if self.has_params else []

    def spec(self) -> dict:
        d = {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}
        if self.kind == "dropout":
            d["dropout_rate"] = self.dropout_rate
        return d

    def __call__(self, x: Tensor, train: bool, rng: np.random.Generator | None, logits: bool = False):
        if self.kind == "dense":
            return x @ self.weight + self.bias
        if self.kind == "relu":
            return x.relu()
        if self.kind == "dropout":
            if not train or self.dropout_rate == 0.0:
                return x
            keep = 1.0 - self.dropout_rate
            mask = (rng.random(x.shape) < keep) / keep
            return x * mask
        z = x @ self.weight + self.bias
        return z if logits else z.softmax(axis=-1)


class SequentialModel:
    """An ordered stack of layers; the plain, unwrapped network."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("a model needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} ({layers[i].kind}) expects width {layers[i].in_dim}, "
                    f"previous layer produces {layers[i - 1].out_dim}"
                )
        self.layers = list(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def is_classifier(self) -> bool:
        return self.layers[-1].kind == "softmax-output"

    def __len__(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def initialize(self, seed: int) -> "SequentialModel":
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng)
        return self

    def specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def forward(
        self,
        x,
        mode: str = "infer",
        rng: np.random.Generator | int | None = None,
        stochastic: bool = False,
        logits: bool = False,
    ) -> Tensor:
        """Run the stack on ``x``.

        Dropout is active in ``train`` mode, or in ``infer`` mode when
        ``stochastic`` is set (Monte Carlo dropout).  ``logits`` skips the
        softmax of a ``softmax-output`` final layer.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        active = mode == "train" or stochastic
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.ndim == 1:
            h = h.reshape(1, -1)
        for i, layer in enumerate(self.layers):
            if h.shape[-1] != layer.in_dim:
                raise ShapeError(
                    f"layer {i} ({layer.kind}) expects input width {layer.in_dim}, got {h.shape[-1]}"
                )
            h = layer(h, active, rng, logits=logits and i == len(self.layers) - 1)
            if not np.all(np.isfinite(h.data)):
                raise NonFiniteError(f"non-finite activation after layer {i} ({layer.kind})")
        return h

    __call__ = forward


def forward(model: SequentialModel, x, mode: str = "infer", rng_seed: int | None = None) -> Tensor:
    return model.forward(x, mode=mode, rng=rng_seed)


def mlp(
    dims: list[int],
    seed: int = 0,
    dropout: float = 0.0,
    classifier: bool = False,
) -> SequentialModel:
    """Dense/relu stack with widths ``dims``; linear (or softmax) output layer."""
    if len(dims) < 2:
        raise ValueError("mlp needs at least input and output widths")
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        if last:
            layers.append(Layer("softmax-output" if classifier else "dense", a, b))
        else:
            layers.append(Layer("dense", a, b))
            layers.append(Layer("relu", b, b))
            if dropout > 0:
                layers.append(Layer("dropout", b, b, dropout_rate=dropout))
    return SequentialModel(layers).initialize(seed)


def model_from_specs(specs: list[dict]) -> SequentialModel:
    return SequentialModel([Layer(**s) for s in specs])


def check_all_finite(model: SequentialModel) -> None:
    for p in model.parameters():
        check_finite(p, "model parameter")


# ------------------------------------------------------------------ checkpoint
# Layout: 8-byte little-endian header length, UTF-8 JSON header, then the
# parameters as consecutive little-endian float64 values.

_HEADER_LEN = struct.Struct("<Q")


def _pack(header: dict, arrays: list[np.ndarray]) -> bytes:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return _HEADER_LEN.pack(len(blob)) + blob + body


def _unpack(raw: bytes) -> tuple[dict, memoryview]:
    if len(raw) < _HEADER_LEN.size:
        raise ValueError("checkpoint truncated")
    (n,) = _HEADER_LEN.unpack_from(raw)
    header = json.loads(raw[_HEADER_LEN.size : _HEADER_LEN.size + n].decode("utf-8"))
    return header, memoryview(raw)[_HEADER_LEN.size + n :]


def save_models(path, models: dict[str, SequentialModel], extra: dict | None = None) -> None:
    """Write several named models into one checkpoint file."""
    entries, arrays, offset = {}, [], 0
    for name, model in models.items():
        params = []
        for i, layer in enumerate(model.layers):
            for kind, t in (("weight", layer.weight), ("bias", layer.bias)):
                if t is None:
                    continue
                params.append({"layer": i, "param": kind, "offset": offset, "shape": list(t.shape)})
                arrays.append(t.data)
                offset += t.data.size
        entries[name] = {"layers": model.specs(), "params": params}
    header = {"format": "riskwrap-checkpoint", "version": 1, "models": entries, "extra": extra or {}}
    Path(path).write_bytes(_pack(header, arrays))


def load_models(path) -> tuple[dict[str, SequentialModel], dict]:
    header, body = _unpack(Path(path).read_bytes())
    if header.get("format") != "riskwrap-checkpoint":
        raise ValueError(f"{path} is not a riskwrap checkpoint")
    values = np.frombuffer(body, dtype="<f8")
    models = {}
    for name, entry in header["models"].items():
        model = model_from_specs(entry["layers"])
        for p in entry["params"]:
            size = int(np.prod(p["shape"]))
            chunk = values[p["offset"] : p["offset"] + size]
            if chunk.size != size:
                raise ValueError("checkpoint truncated")
            setattr(model.layers[p["layer"]], p["param"], parameter(chunk.reshape(p["shape"]).astype(np.float64)))
        models[name] = model
    return models, header.get("extra", {})


def save_checkpoint(model: SequentialModel, path) -> None:
    save_models(path, {"model": model})


def load_checkpoint(path) -> SequentialModel:
    models, _ = load_models(path)
    return models["model"]
