"""Softmax classifiers with analytic gradients.

Two kinds are supported: ``logistic`` (multinomial logistic regression) and
``mlp1`` (one ReLU hidden layer). Parameters are flattened per layer as the
row-major ``(fan_in, fan_out)`` weight matrix followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .core import ContractViolation, RngStream, as_vector

MODEL_KINDS = ("logistic", "mlp1")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logistic"
    input_dim: int = 16
    num_classes: int = 10
    hidden_dim: int = 32

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ContractViolation(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1 or self.hidden_dim < 1:
            raise ContractViolation("model dimensions must be positive")

    @property
    def num_params(self) -> int:
        d, C, H = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "logistic":
            return (d + 1) * C
        return (d + 1) * H + (H + 1) * C

    def layer_shapes(self) -> list[tuple[int, int]]:
        if self.kind == "logistic":
            return [(self.input_dim, self.num_classes)]
        return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)]

    def bias_mask(self) -> np.ndarray:
        """Boolean mask that is True on bias entries."""
        mask = np.zeros(self.num_params, dtype=bool)
        off = 0
        for fan_in, fan_out in self.layer_shapes():
            off += fan_in * fan_out
            mask[off:off + fan_out] = True
            off += fan_out
        return mask


class Batch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray


def init_params(spec: ModelSpec, rng: RngStream) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    gen = rng.generator()
    parts = []
    for fan_in, fan_out in spec.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(gen.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return as_vector(np.concatenate(parts))


def _check_params(spec: ModelSpec, params) -> np.ndarray:
    params = np.ascontiguousarray(params, dtype=np.float64)
    if params.shape != (spec.num_params,):
        raise ContractViolation(f"expected {spec.num_params} parameters, got shape {params.shape}")
    return params


def _check_features(spec: ModelSpec, features) -> np.ndarray:
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ContractViolation(f"features must be n x {spec.input_dim}, got shape {X.shape}")
    return X


def logits(spec: ModelSpec, params, features) -> np.ndarray:
    params = _check_params(spec, params)
    X = _check_features(spec, features)
    d, C, H = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "logistic":
        return X @ params[: d * C].reshape(d, C) + params[d * C:]
    o1, o2 = d * H, d * H + H
    o3 = o2 + H * C
    h = np.maximum(X @ params[:o1].reshape(d, H) + params[o1:o2], 0.0)
    return h @ params[o2:o3].reshape(H, C) + params[o3:]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_probs(spec: ModelSpec, params, features) -> np.ndarray:
    return softmax(logits(spec, params, features))


def loss_and_grad(spec: ModelSpec, params, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over ``batch`` and its exact gradient."""
    params = _check_params(spec, params)
    X = _check_features(spec, batch.features)
    y = np.ascontiguousarray(batch.labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise ContractViolation("loss_and_grad needs a non-empty batch")
    if y.shape != (X.shape[0],):
        raise ContractViolation("labels length must match feature rows")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ContractViolation("label out of range")
    if spec.kind == "logistic":
        loss, grad = _kernels.logistic_loss_grad(params, X, y, spec.num_classes)
    else:
        loss, grad = _kernels.mlp_loss_grad(params, X, y, spec.hidden_dim, spec.num_classes)
    return float(loss), grad


def predict(spec: ModelSpec, params, features) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(forward_probs(spec, params, features), axis=1)
