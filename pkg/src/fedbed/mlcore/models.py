"""The closed model set: linear regression, softmax regression, and MLPs.

Gradients are exact analytic backprop, checked against central finite
differences in the test suite. Dropout (rate from TrainingArgs, never the
plan) is applied to hidden activations in training mode only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DomainError, IncompatibleLoss, ShapeMismatch
from ..protocol import (
    LinearRegressionSpec,
    LogisticRegressionSpec,
    LossKind,
    MLPSpec,
)
from .losses import loss_gradient
from .params import ParamVector


def expected_layout(spec) -> tuple:
    """Tensor names and shapes implied by a model spec."""
    if isinstance(spec, LinearRegressionSpec):
        return (("w", (spec.in_dim,)), ("b", (1,)))
    if isinstance(spec, LogisticRegressionSpec):
        return (("w", (spec.in_dim, spec.classes)), ("b", (spec.classes,)))
    if isinstance(spec, MLPSpec):
        layout = []
        dims = spec.layer_dims
        for i in range(len(dims) - 1):
            layout.append((f"w{i}", (dims[i], dims[i + 1])))
            layout.append((f"b{i}", (dims[i + 1],)))
        return tuple(layout)
    raise ShapeMismatch(f"unknown model spec {type(spec).__name__}")


def input_dim(spec) -> int:
    if isinstance(spec, (LinearRegressionSpec, LogisticRegressionSpec)):
        return spec.in_dim
    return spec.layer_dims[0]


def init_params(spec, seed: int) -> ParamVector:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], tensor order fixed."""
    rng = np.random.default_rng(seed)
    tensors = []
    for name, shape in expected_layout(spec):
        fan_in = shape[0] if name.startswith("w") else _bias_fan_in(spec, name)
        bound = 1.0 / np.sqrt(fan_in)
        tensors.append((name, rng.uniform(-bound, bound, size=shape)))
    return ParamVector(tensors)


def _bias_fan_in(spec, name: str) -> int:
    if isinstance(spec, LinearRegressionSpec):
        return spec.in_dim
    if isinstance(spec, LogisticRegressionSpec):
        return spec.in_dim
    idx = int(name[1:])
    return spec.layer_dims[idx]


@dataclass
class ModelInstance:
    spec: object
    params: ParamVector
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DomainError("dropout_rate must be in [0, 1)")
        expected = expected_layout(self.spec)
        if self.params.layout() != expected:
            raise ShapeMismatch(
                f"params layout {self.params.layout()} does not match "
                f"spec layout {expected}")

    def with_params(self, params: ParamVector) -> "ModelInstance":
        return ModelInstance(spec=self.spec, params=params,
                             dropout_rate=self.dropout_rate)


_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a ** 2),
    "sigmoid": (lambda z: 1.0 / (1.0 + np.exp(-z)), lambda z, a: a * (1.0 - a)),
}


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_input(model: ModelInstance, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != input_dim(model.spec):
        raise ShapeMismatch(
            f"input width {x.shape[-1] if x.ndim else 0} != model input "
            f"dimension {input_dim(model.spec)}")
    return x


def _forward_cached(model: ModelInstance, x: np.ndarray,
                    training_mode: bool, rng) -> tuple:
    """Returns (predictions, cache) where cache feeds backward()."""
    spec = model.spec
    p = model.params
    if isinstance(spec, LinearRegressionSpec):
        pred = x @ p["w"] + p["b"][0]
        return pred, {"x": x}
    if isinstance(spec, LogisticRegressionSpec):
        logits = x @ p["w"] + p["b"]
        probs = _softmax(logits)
        return probs, {"x": x, "probs": probs}
    act, _ = _ACTIVATIONS[spec.activation]
    squash_output = spec.activation == "sigmoid"
    n_layers = len(spec.layer_dims) - 1
    use_dropout = training_mode and model.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise DomainError("training-mode dropout needs a seeded generator")
    h = x
    inputs, zs, masks = [], [], []
    for i in range(n_layers):
        inputs.append(h)
        z = h @ p[f"w{i}"] + p[f"b{i}"]
        zs.append(z)
        last = i == n_layers - 1
        if not last or squash_output:
            h = act(z)
        else:
            h = z
        if not last and use_dropout:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(h.shape) < keep).astype(np.float64) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    return h, {"inputs": inputs, "zs": zs, "masks": masks, "out": h}


def forward(model: ModelInstance, batch_inputs, training_mode: bool = False,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Model predictions; deterministic given (params, inputs, rng, mode)."""
    x = _check_input(model, batch_inputs)
    pred, _ = _forward_cached(model, x, training_mode, rng)
    return pred


def gradient(model: ModelInstance, batch: tuple, loss_spec: LossKind,
             training_mode: bool = False,
             rng: Optional[np.random.Generator] = None) -> ParamVector:
    """Mean-over-batch gradient of the loss w.r.t. every parameter.

    Layout matches model.params exactly.
    """
    loss_spec = LossKind(loss_spec)
    inputs, targets = batch
    x = _check_input(model, inputs)
    if x.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    pred, cache = _forward_cached(model, x, training_mode, rng)
    try:
        dpred = loss_gradient(pred, targets, loss_spec)
    except DomainError as exc:
        raise IncompatibleLoss(str(exc)) from exc
    spec = model.spec
    p = model.params
    if isinstance(spec, LinearRegressionSpec):
        dpred = dpred.reshape(-1)
        return ParamVector([("w", x.T @ dpred), ("b", np.array([dpred.sum()]))])
    if isinstance(spec, LogisticRegressionSpec):
        probs = cache["probs"]
        # backprop through softmax: dz = p * (dp - sum(dp * p))
        inner = (dpred * probs).sum(axis=1, keepdims=True)
        dz = probs * (dpred - inner)
        return ParamVector([("w", x.T @ dz), ("b", dz.sum(axis=0))])
    return _mlp_backward(model, cache, dpred)


def _mlp_backward(model: ModelInstance, cache: dict, dpred: np.ndarray) -> ParamVector:
    spec = model.spec
    p = model.params
    act_name = spec.activation
    _, act_grad = _ACTIVATIONS[act_name]
    squash_output = act_name == "sigmoid"
    n_layers = len(spec.layer_dims) - 1
    inputs, zs, masks = cache["inputs"], cache["zs"], cache["masks"]
    if dpred.ndim == 1:
        dpred = dpred.reshape(-1, 1)
    grads = {}
    delta = dpred
    for i in reversed(range(n_layers)):
        last = i == n_layers - 1
        if not last and masks[i] is not None:
            delta = delta * masks[i]
        if not last or squash_output:
            a = _layer_activation(zs[i], act_name)
            delta = delta * act_grad(zs[i], a)
        grads[f"w{i}"] = inputs[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ p[f"w{i}"].T
    return ParamVector((name, grads[name]) for name, _ in model.params.layout())


def _layer_activation(z: np.ndarray, act_name: str) -> np.ndarray:
    fn, _ = _ACTIVATIONS[act_name]
    return fn(z)
