"""Materialized model parameters and the forward/backward passes over a ModelSpec."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ShapeError
from . import layers as L
from .spec import ModelSpec, infer_shapes, param_shapes


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    mode: str = "train"
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        want_train, want_frozen = param_shapes(self.spec)
        for got, want, what in ((self.params, want_train, "trainable"), (self.buffers, want_frozen, "non-trainable")):
            if set(got) != set(want):
                raise ShapeError(f"{what} parameter names {sorted(got)} do not match spec {sorted(want)}")
            for name, arr in got.items():
                if arr.shape != want[name]:
                    raise ShapeError(f"{name}: shape {arr.shape} != spec shape {want[name]}")

    def train(self) -> "ModelState":
        self.mode = "train"
        return self

    def eval(self) -> "ModelState":
        self.mode = "eval"
        return self

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def counts(self) -> tuple[int, int, int]:
        n_train = sum(a.size for a in self.params.values())
        n_frozen = sum(a.size for a in self.buffers.values())
        return n_train + n_frozen, n_train, n_frozen

    def state_dict(self) -> dict[str, np.ndarray]:
        """All parameters, trainable first, in spec order."""
        return {**self.params, **self.buffers}


def init_model(spec: ModelSpec, seed: int = 0) -> ModelState:
    """He-uniform kernels (limit sqrt(6 / fan_in)), zero biases, unit BN scale."""
    infer_shapes(spec)
    rng = np.random.default_rng(seed)
    trainable, frozen = param_shapes(spec)
    params = {}
    for name, shape in trainable.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "kernel":
            fan_in = math.prod(shape[:-1])
            limit = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif leaf == "gamma":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {
        name: (np.zeros(shape) if name.endswith("moving_mean") else np.ones(shape))
        for name, shape in frozen.items()
    }
    return ModelState(spec, params, buffers)


def zeros_like_model(spec: ModelSpec) -> ModelState:
    model = init_model(spec)
    for arr in model.params.values():
        arr[...] = 0.0
    return model


def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != len(spec.input_shape) + 1 or x.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match model input {spec.input_shape}")
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    return x


def run_forward(model: ModelState, x, *, training: bool, update_stats: bool = False):
    """Forward pass returning ``(logits, tape)`` where ``tape`` feeds ``run_backward``.

    ``training`` selects batch statistics for BN; ``update_stats`` additionally
    folds them into the moving averages (only train_step asks for that).
    """
    spec = model.spec
    out = _check_input(spec, x)
    tape = []
    for name, layer in zip(spec.layer_names(), spec.layers):
        kind = layer.kind
        p = model.params
        if kind == "conv2d":
            out, cache = L.conv2d_forward(out, p[f"{name}.kernel"], p[f"{name}.bias"], layer["stride"], layer["padding"])
        elif kind == "batchnorm":
            mean_key, var_key = f"{name}.moving_mean", f"{name}.moving_variance"
            if training:
                axes = tuple(range(out.ndim - 1))
                mean, var = out.mean(axis=axes), out.var(axis=axes)
                if update_stats:
                    mom = layer["momentum"]
                    model.buffers[mean_key] = mom * model.buffers[mean_key] + (1 - mom) * mean
                    model.buffers[var_key] = mom * model.buffers[var_key] + (1 - mom) * var
            else:
                mean, var = model.buffers[mean_key], model.buffers[var_key]
            out, cache = L.batchnorm_forward(out, p[f"{name}.gamma"], p[f"{name}.beta"], mean, var, layer["epsilon"])
            cache = (cache, training)
        elif kind == "leaky_relu":
            out, cache = L.leaky_relu_forward(out, layer["slope"])
        elif kind == "maxpool2d":
            out, cache = L.maxpool2d_forward(out, layer["window"], layer["stride"], layer["padding"])
        elif kind == "global_avg_pool":
            out, cache = L.global_avg_pool_forward(out)
        else:
            out, cache = L.dense_forward(out, p[f"{name}.kernel"], p[f"{name}.bias"])
        tape.append((name, kind, cache))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite model output")
    return out, tape


def run_backward(tape, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    dout = dlogits
    for name, kind, cache in reversed(tape):
        if kind == "conv2d":
            dout, g = L.conv2d_backward(dout, cache)
        elif kind == "batchnorm":
            dout, g = L.batchnorm_backward(dout, cache[0], cache[1])
        elif kind == "leaky_relu":
            dout, g = L.leaky_relu_backward(dout, cache)
        elif kind == "maxpool2d":
            dout, g = L.maxpool2d_backward(dout, cache)
        elif kind == "global_avg_pool":
            dout, g = L.global_avg_pool_backward(dout, cache)
        else:
            dout, g = L.dense_backward(dout, cache)
        for leaf, value in g.items():
            if not np.all(np.isfinite(value)):
                raise NumericError(f"non-finite gradient in layer {name} ({leaf})")
            grads[f"{name}.{leaf}"] = value
    return grads


def forward(model: ModelState, batch) -> np.ndarray:
    """Logits ``(batch, outputs)`` using the statistics implied by ``model.mode``."""
    logits, _ = run_forward(model, batch, training=model.mode == "train")
    return logits


def predict_logits(model: ModelState, inputs, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits over a large input array, batched."""
    old_mode = model.mode
    model.eval()
    try:
        chunks = [forward(model, inputs[i : i + batch_size]) for i in range(0, len(inputs), batch_size)]
    finally:
        model.mode = old_mode
    return np.concatenate(chunks, axis=0)
