"""Tiny differentiable model zoo: linear regression, binary logistic
regression, and a one-hidden-layer MLP.

Each model exposes summed/averaged loss, analytic gradients, per-example
gradients (the raw material for empirical-Fisher curvature), a central
finite-difference gradient as an independent check, and prediction /
accuracy helpers.  Gradients are hand-derived backprop rather than a
general autodiff engine: three fixed architectures keep the arithmetic
auditable and the package dependency-light.

Conventions
-----------
* Linear and logistic models have no bias term; the decision boundary of
  the classifiers passes through the origin.
* The MLP computes ``w2 . act(W1 x + b1) + b2`` with parameter layout
  order [w1, b1, w2, b2].
* The logistic loss uses the log-sum-exp form throughout; curvature
  estimates square gradients, which amplifies any instability.
* Classification tie at probability exactly 0.5 predicts class 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    ConfigError,
    EmptyDataError,
    IoError,
    LayoutError,
    NumericError,
)
from .params import ParamLayout, ParamVector

__all__ = [
    "TaskDataset",
    "ModelSpec",
    "LOSS_KINDS",
    "MODEL_KINDS",
    "loss",
    "grad",
    "per_example_grads",
    "fd_grad",
    "predict",
    "accuracy",
    "save_dataset",
    "load_dataset",
]

MODEL_KINDS = ("linear_regression", "logistic", "mlp")
LOSS_KINDS = ("squared_error", "logistic_nll")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True, eq=False)
class TaskDataset:
    """Supervised examples with a task identifier and seed provenance."""

    task_id: str
    inputs: np.ndarray
    targets: np.ndarray
    seed: int = 0

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if inputs.size == 0:
            inputs = inputs.reshape(0, inputs.shape[-1])
        if inputs.ndim != 2:
            raise ConfigError("dataset inputs must be a 2-D (n_examples, n_features) array")
        if inputs.shape[0] != targets.shape[0]:
            raise ConfigError(
                f"dataset has {inputs.shape[0]} input rows but {targets.shape[0]} targets"
            )
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise NumericError("dataset values must be finite")
        inputs.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def slice(self, idx) -> "TaskDataset":
        """Subset of rows, preserving task_id and seed provenance."""
        idx = np.asarray(idx)
        return TaskDataset(self.task_id, self.inputs[idx], self.targets[idx], self.seed)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description for one of the three model kinds."""

    kind: str
    n_features: int
    hidden: int | None = None
    activation: str | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if self.kind == "mlp":
            if self.hidden is None or self.hidden < 1:
                raise ConfigError("mlp models require a positive hidden width")
            if self.activation not in ACTIVATIONS:
                raise ConfigError(f"mlp activation must be one of {ACTIVATIONS}")
        else:
            if self.hidden is not None or self.activation is not None:
                raise ConfigError(f"hidden/activation are only valid for mlp, not {self.kind!r}")

    def layout(self) -> ParamLayout:
        """Canonical parameter layout for this architecture."""
        if self.kind == "mlp":
            h, d = self.hidden, self.n_features
            return ParamLayout((("w1", (h, d)), ("b1", (h,)), ("w2", (h,)), ("b2", (1,))))
        return ParamLayout((("w", (self.n_features,)),))


def _check_inputs(spec: ModelSpec, loss_kind: str, theta: ParamVector, data: TaskDataset) -> None:
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    if spec.kind == "linear_regression" and loss_kind != "squared_error":
        raise ConfigError("linear_regression only supports squared_error loss")
    if spec.kind == "logistic" and loss_kind != "logistic_nll":
        raise ConfigError("logistic models only support logistic_nll loss")
    if theta.layout != spec.layout():
        raise LayoutError("theta layout does not match the model's canonical layout")
    if data.n and data.n_features != spec.n_features:
        raise LayoutError(
            f"dataset has {data.n_features} features but the model expects {spec.n_features}"
        )
    if loss_kind == "logistic_nll" and data.n:
        t = data.targets
        if not np.all((t == 0.0) | (t == 1.0)):
            raise ConfigError("logistic_nll requires {0,1} targets")


def _mlp_forward(spec: ModelSpec, theta: ParamVector, X: np.ndarray):
    w1 = theta.tensor("w1")
    b1 = theta.tensor("b1")
    w2 = theta.tensor("w2")
    b2 = theta.tensor("b2")
    z1 = X @ w1.T + b1
    if spec.activation == "tanh":
        a1 = np.tanh(z1)
    else:
        a1 = np.maximum(z1, 0.0)
    out = a1 @ w2 + b2[0]
    return z1, a1, out


def _raw_outputs(spec: ModelSpec, theta: ParamVector, X: np.ndarray) -> np.ndarray:
    if spec.kind == "mlp":
        return _mlp_forward(spec, theta, X)[2]
    return X @ theta.values


def _per_example_losses(spec, loss_kind, theta, data) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        out = _raw_outputs(spec, theta, data.inputs)
        if loss_kind == "squared_error":
            return 0.5 * (out - data.targets) ** 2
        return np.logaddexp(0.0, out) - data.targets * out


def loss(spec: ModelSpec, loss_kind: str, theta: ParamVector, data: TaskDataset, reduce: str = "sum") -> float:
    """Summed (default) or averaged loss over the dataset."""
    if reduce not in ("sum", "mean"):
        raise ConfigError(f"reduce must be 'sum' or 'mean', got {reduce!r}")
    _check_inputs(spec, loss_kind, theta, data)
    losses = _per_example_losses(spec, loss_kind, theta, data)
    if reduce == "mean":
        if data.n == 0:
            raise EmptyDataError("mean loss of an empty dataset is undefined")
        value = float(np.mean(losses))
    else:
        value = float(np.sum(losses))
    if not np.isfinite(value):
        raise NumericError("loss overflowed to a non-finite value")
    return value


def _output_grads(loss_kind: str, out: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if loss_kind == "squared_error":
        return out - targets
    return expit(out) - targets


def grad(spec: ModelSpec, loss_kind: str, theta: ParamVector, data: TaskDataset, reduce: str = "sum") -> ParamVector:
    """Analytic gradient of :func:`loss` with the same reduction."""
    if reduce not in ("sum", "mean"):
        raise ConfigError(f"reduce must be 'sum' or 'mean', got {reduce!r}")
    _check_inputs(spec, loss_kind, theta, data)
    layout = spec.layout()
    if data.n == 0:
        if reduce == "mean":
            raise EmptyDataError("mean gradient of an empty dataset is undefined")
        return ParamVector.zeros(layout)
    X, y = data.inputs, data.targets
    if spec.kind == "mlp":
        z1, a1, out = _mlp_forward(spec, theta, X)
        g = _output_grads(loss_kind, out, y)
        w2 = theta.tensor("w2")
        dz1 = (g[:, None] * w2) * _act_deriv(spec.activation, z1, a1)
        parts = [
            (dz1.T @ X).reshape(-1),
            dz1.sum(axis=0),
            a1.T @ g,
            np.array([g.sum()]),
        ]
        flat = np.concatenate(parts)
    else:
        out = X @ theta.values
        g = _output_grads(loss_kind, out, y)
        flat = X.T @ g
    if reduce == "mean":
        flat = flat / data.n
    if not np.all(np.isfinite(flat)):
        raise NumericError("gradient overflowed to non-finite values")
    return ParamVector(layout, flat)


def _act_deriv(activation: str, z1: np.ndarray, a1: np.ndarray) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - a1 * a1
    return (z1 > 0.0).astype(np.float64)


def per_example_grads(spec: ModelSpec, loss_kind: str, theta: ParamVector, data: TaskDataset) -> list[ParamVector]:
    """One gradient per example, in dataset order; their sum equals ``grad(..., reduce='sum')``."""
    _check_inputs(spec, loss_kind, theta, data)
    layout = spec.layout()
    X, y = data.inputs, data.targets
    if data.n == 0:
        return []
    if spec.kind == "mlp":
        z1, a1, out = _mlp_forward(spec, theta, X)
        g = _output_grads(loss_kind, out, y)
        w2 = theta.tensor("w2")
        dz1 = (g[:, None] * w2) * _act_deriv(spec.activation, z1, a1)
        dW1 = dz1[:, :, None] * X[:, None, :]
        G = np.concatenate(
            [dW1.reshape(data.n, -1), dz1, a1 * g[:, None], g[:, None]], axis=1
        )
    else:
        out = X @ theta.values
        g = _output_grads(loss_kind, out, y)
        G = X * g[:, None]
    if not np.all(np.isfinite(G)):
        raise NumericError("per-example gradients overflowed to non-finite values")
    return [ParamVector(layout, row) for row in G]


def fd_grad(spec: ModelSpec, loss_kind: str, theta: ParamVector, data: TaskDataset, h: float, reduce: str = "sum") -> ParamVector:
    """Central finite-difference gradient; independent check on :func:`grad`."""
    if not h > 0.0:
        raise ConfigError("finite-difference step h must be > 0")
    _check_inputs(spec, loss_kind, theta, data)
    base = theta.values
    out = np.empty_like(base)
    for j in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[j] += h
        minus[j] -= h
        lp = loss(spec, loss_kind, ParamVector(theta.layout, plus), data, reduce)
        lm = loss(spec, loss_kind, ParamVector(theta.layout, minus), data, reduce)
        out[j] = (lp - lm) / (2.0 * h)
    return ParamVector(theta.layout, out)


def predict(spec: ModelSpec, theta: ParamVector, data: TaskDataset) -> np.ndarray:
    """Raw outputs for regression models, probabilities for logistic ones."""
    if theta.layout != spec.layout():
        raise LayoutError("theta layout does not match the model's canonical layout")
    if data.n == 0:
        raise EmptyDataError("cannot predict on an empty dataset")
    if data.n_features != spec.n_features:
        raise LayoutError("dataset feature count does not match the model")
    out = _raw_outputs(spec, theta, data.inputs)
    if not np.all(np.isfinite(out)):
        raise NumericError("model outputs overflowed to non-finite values")
    if spec.kind == "logistic":
        return expit(out)
    return out


def accuracy(spec: ModelSpec, theta: ParamVector, data: TaskDataset) -> float:
    """Fraction of examples whose thresholded prediction matches the target.

    The decision rule is sigmoid(output) >= 0.5, i.e. raw output >= 0,
    with the tie at exactly 0.5 predicting class 1.  Only classification
    models (logistic, mlp) support this.
    """
    if spec.kind == "linear_regression":
        raise ConfigError("accuracy is undefined for linear_regression models")
    if theta.layout != spec.layout():
        raise LayoutError("theta layout does not match the model's canonical layout")
    if data.n == 0:
        raise EmptyDataError("cannot compute accuracy on an empty dataset")
    if data.n_features != spec.n_features:
        raise LayoutError("dataset feature count does not match the model")
    out = _raw_outputs(spec, theta, data.inputs)
    pred = (out >= 0.0).astype(np.float64)
    return float(np.mean(pred == data.targets))


def save_dataset(data: TaskDataset, path) -> None:
    """Write a dataset as JSON with keys task_id, seed, inputs, targets."""
    doc = {
        "task_id": data.task_id,
        "seed": data.seed,
        "inputs": data.inputs.tolist(),
        "targets": data.targets.tolist(),
    }
    try:
        Path(path).write_text(json.dumps(doc) + "\n")
    except OSError as exc:
        raise IoError(f"failed to write dataset {path!s}: {exc}") from exc


def load_dataset(path) -> TaskDataset:
    """Inverse of :func:`save_dataset`."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"failed to read dataset {path!s}: {exc}") from exc
    try:
        doc = json.loads(text)
        return TaskDataset(doc["task_id"], doc["inputs"], doc["targets"], doc.get("seed", 0))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed dataset file {path!s}: {exc}") from exc
