"""Declarative model architectures: layer specs, shape inference, parameter counts.

A spec document is plain text with one entry per line::

    input 224 224 3
    conv2d out_channels=32 kernel=3 stride=2 padding=same
    batchnorm
    leaky_relu slope=0.01
    maxpool2d window=2 stride=2
    global_avg_pool
    dense out_units=10

Blank lines and ``#`` comments are ignored. Omitted hyperparameters take
the defaults in ``LAYER_DEFAULTS``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..errors import FormatError, ShapeError

LAYER_DEFAULTS: dict[str, dict[str, object]] = {
    "conv2d": {"out_channels": None, "kernel": 3, "stride": 1, "padding": "same"},
    "batchnorm": {"epsilon": 1e-5, "momentum": 0.9},
    "leaky_relu": {"slope": 0.01},
    "maxpool2d": {"window": 2, "stride": 2, "padding": "same"},
    "global_avg_pool": {},
    "dense": {"out_units": None},
}
LAYER_KINDS = tuple(LAYER_DEFAULTS)

_INT_KEYS = {"out_channels", "kernel", "stride", "window", "out_units"}
_FLOAT_KEYS = {"epsilon", "momentum", "slope"}
_PADDINGS = ("same", "valid")

Shape = tuple[int, ...]


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hp: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_DEFAULTS:
            raise FormatError(f"unknown layer kind {self.kind!r}")
        defaults = LAYER_DEFAULTS[self.kind]
        unknown = set(self.hp) - set(defaults)
        if unknown:
            raise FormatError(f"{self.kind}: unknown hyperparameter(s) {sorted(unknown)}")
        merged = {**defaults, **self.hp}
        for key, value in merged.items():
            if value is None:
                raise FormatError(f"{self.kind}: missing required hyperparameter {key!r}")
            if key in _INT_KEYS:
                if int(value) != value or int(value) <= 0:
                    raise FormatError(f"{self.kind}: {key} must be a positive integer, got {value!r}")
                merged[key] = int(value)
            elif key in _FLOAT_KEYS:
                merged[key] = float(value)
            elif key == "padding" and value not in _PADDINGS:
                raise FormatError(f"{self.kind}: padding must be one of {_PADDINGS}, got {value!r}")
        if self.kind == "leaky_relu" and not 0.0 < merged["slope"] < 1.0:
            raise FormatError("leaky_relu: slope must lie in (0, 1)")
        if self.kind == "batchnorm":
            if merged["epsilon"] <= 0:
                raise FormatError("batchnorm: epsilon must be positive")
            if not 0.0 <= merged["momentum"] < 1.0:
                raise FormatError("batchnorm: momentum must lie in [0, 1)")
        object.__setattr__(self, "hp", merged)

    def __getitem__(self, key):
        return self.hp[key]

    def to_line(self) -> str:
        parts = [self.kind] + [f"{k}={v}" for k, v in self.hp.items()]
        return " ".join(parts)


@dataclass(frozen=True)
class ModelSpec:
    input_shape: Shape
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        shape = tuple(int(d) for d in self.input_shape)
        if len(shape) not in (1, 3) or any(d <= 0 for d in shape):
            raise ShapeError(f"input shape must be (F,) or (H, W, C) with positive extents, got {shape}")
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "layers", tuple(self.layers))

    def layer_names(self) -> list[str]:
        return [f"{i + 1:02d}_{layer.kind}" for i, layer in enumerate(self.layers)]

    def with_input_shape(self, shape) -> "ModelSpec":
        return ModelSpec(tuple(shape), self.layers)

    def with_head(self, out_units: int) -> "ModelSpec":
        """Replace the final dense layer's width."""
        if not self.layers or self.layers[-1].kind != "dense":
            raise ShapeError("model has no final dense layer")
        head = LayerSpec("dense", {"out_units": out_units})
        return ModelSpec(self.input_shape, self.layers[:-1] + (head,))

    def to_text(self) -> str:
        lines = ["input " + " ".join(str(d) for d in self.input_shape)]
        lines += [layer.to_line() for layer in self.layers]
        return "\n".join(lines) + "\n"


def _parse_value(raw: str):
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_spec(text: str) -> ModelSpec:
    """Parse a spec document. Errors carry the 1-based line number."""
    input_shape = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "input":
                if input_shape is not None:
                    raise FormatError("duplicate input line")
                try:
                    input_shape = tuple(int(tok) for tok in rest)
                except ValueError:
                    raise FormatError(f"input extents must be integers: {rest}") from None
                if len(input_shape) not in (1, 3) or min(input_shape) <= 0:
                    raise FormatError(f"input must be 1 or 3 positive extents, got {rest}")
                continue
            hp = {}
            for tok in rest:
                key, sep, value = tok.partition("=")
                if not sep or not key or not value:
                    raise FormatError(f"expected key=value, got {tok!r}")
                hp[key] = _parse_value(value)
            layers.append(LayerSpec(head, hp))
        except FormatError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    if input_shape is None:
        raise FormatError("spec has no input line")
    return ModelSpec(input_shape, tuple(layers))


def load_spec(path) -> ModelSpec:
    """Load a spec from a file path, or a bundled one via ``builtin:<name>``."""
    path = str(path)
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        try:
            text = resources.files("fkdsim.nn").joinpath("specs").joinpath(f"{name}.spec").read_text()
        except FileNotFoundError:
            raise FormatError(f"no bundled spec named {name!r}") from None
        return parse_spec(text)
    return parse_spec(Path(path).read_text())


def student_spec() -> ModelSpec:
    """The canonical 14-layer student (224x224x3 input, 10-way head)."""
    return load_spec("builtin:student")


def _window_out(size: int, window: int, stride: int, padding: str, what: str) -> int:
    if padding == "same":
        return math.ceil(size / stride)
    if window > size:
        raise ShapeError(f"{what}: window {window} larger than input extent {size}")
    return (size - window) // stride + 1


def layer_output_shape(layer: LayerSpec, shape: Shape, name: str = "") -> Shape:
    what = name or layer.kind
    kind = layer.kind
    if kind in ("conv2d", "maxpool2d", "global_avg_pool") and len(shape) != 3:
        raise ShapeError(f"{what}: expects (H, W, C) input, got {shape}")
    if kind == "conv2d":
        h, w, _ = shape
        k, s, pad = layer["kernel"], layer["stride"], layer["padding"]
        return (_window_out(h, k, s, pad, what), _window_out(w, k, s, pad, what), layer["out_channels"])
    if kind == "maxpool2d":
        h, w, c = shape
        k, s, pad = layer["window"], layer["stride"], layer["padding"]
        return (_window_out(h, k, s, pad, what), _window_out(w, k, s, pad, what), c)
    if kind == "global_avg_pool":
        return (shape[2],)
    if kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"{what}: expects a feature vector, got {shape}")
        return (layer["out_units"],)
    return shape


def infer_shapes(spec: ModelSpec) -> list[Shape]:
    """Per-layer output shapes; raises ShapeError on the first invalid layer."""
    shapes = []
    shape = spec.input_shape
    for name, layer in zip(spec.layer_names(), spec.layers):
        shape = layer_output_shape(layer, shape, name)
        shapes.append(shape)
    if spec.layers and len(shape) != 1:
        raise ShapeError(f"final layer must produce a logit vector, got {shape}")
    return shapes


def param_shapes(spec: ModelSpec) -> tuple[dict[str, Shape], dict[str, Shape]]:
    """Trainable and non-trainable parameter shapes keyed ``<layer>.<param>``."""
    trainable: dict[str, Shape] = {}
    frozen: dict[str, Shape] = {}
    shape = spec.input_shape
    for name, layer in zip(spec.layer_names(), spec.layers):
        if layer.kind == "conv2d":
            k, cout = layer["kernel"], layer["out_channels"]
            trainable[f"{name}.kernel"] = (k, k, shape[2], cout)
            trainable[f"{name}.bias"] = (cout,)
        elif layer.kind == "batchnorm":
            c = shape[-1]
            trainable[f"{name}.gamma"] = (c,)
            trainable[f"{name}.beta"] = (c,)
            frozen[f"{name}.moving_mean"] = (c,)
            frozen[f"{name}.moving_variance"] = (c,)
        elif layer.kind == "dense":
            trainable[f"{name}.kernel"] = (shape[0], layer["out_units"])
            trainable[f"{name}.bias"] = (layer["out_units"],)
        shape = layer_output_shape(layer, shape, name)
    return trainable, frozen


def layer_param_counts(spec: ModelSpec) -> list[int]:
    trainable, frozen = param_shapes(spec)
    counts = []
    for name in spec.layer_names():
        total = 0
        for key, shp in list(trainable.items()) + list(frozen.items()):
            if key.split(".", 1)[0] == name:
                total += math.prod(shp)
        counts.append(total)
    return counts


def count_parameters(spec: ModelSpec) -> tuple[int, int, int]:
    """Return ``(total, trainable, non_trainable)``."""
    infer_shapes(spec)
    trainable, frozen = param_shapes(spec)
    n_train = sum(math.prod(s) for s in trainable.values())
    n_frozen = sum(math.prod(s) for s in frozen.values())
    return n_train + n_frozen, n_train, n_frozen
