"""Dense multilayer perceptron with plain SGD.

Parameters are kept as one flat float32 vector per layer (weights row-major,
then bias), so that quantisation and costing can work layer by layer without
knowing anything about the architecture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, TrainingDivergedError

ACTIVATIONS = ("relu", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    fan_in: int
    fan_out: int
    activation: str = "relu"

    def __post_init__(self):
        if self.fan_in < 1 or self.fan_out < 1:
            raise InputError(f"layer widths must be positive, got {self.fan_in}->{self.fan_out}")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")

    @property
    def dim(self) -> int:
        return self.fan_in * self.fan_out + self.fan_out


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InputError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise InputError(f"layer width mismatch: {prev.fan_out} feeds {nxt.fan_in}")
            if prev.activation == "softmax":
                raise InputError("softmax is only allowed on the output layer")
        if self.layers[-1].activation != "softmax":
            raise InputError("output layer must be softmax")

    @classmethod
    def mlp(cls, widths: Sequence[int]) -> "ModelSpec":
        """``mlp([784, 32, 10])``: ReLU hidden layers, softmax output."""
        if len(widths) < 2:
            raise InputError("need at least input and output widths")
        n = len(widths) - 1
        return cls(tuple(
            LayerSpec(widths[i], widths[i + 1], "softmax" if i == n - 1 else "relu")
            for i in range(n)
        ))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return tuple(layer.dim for layer in self.layers)

    @property
    def total_dim(self) -> int:
        return sum(self.layer_dims)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def class_count(self) -> int:
        return self.layers[-1].fan_out

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.layers[0].fan_in,) + tuple(layer.fan_out for layer in self.layers)


@dataclass(frozen=True, eq=False)
class _LayerVectors:
    spec: ModelSpec
    per_layer: tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = self.spec.layer_dims
        if len(self.per_layer) != len(dims):
            raise InputError(f"expected {len(dims)} layers, got {len(self.per_layer)}")
        frozen = []
        for i, (vec, d) in enumerate(zip(self.per_layer, dims)):
            arr = np.array(vec, dtype=np.float32).reshape(-1)
            if arr.size != d:
                raise InputError(f"layer {i}: expected {d} values, got {arr.size}")
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "per_layer", tuple(frozen))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.per_layer)

    def is_finite(self) -> bool:
        return all(bool(np.isfinite(v).all()) for v in self.per_layer)

    def same_as(self, other: "_LayerVectors") -> bool:
        """Bitwise equality of every layer."""
        return (self.spec == other.spec and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.per_layer, other.per_layer)))

    def _check_shape(self, other: "_LayerVectors") -> None:
        if self.spec.layer_dims != other.spec.layer_dims:
            raise InputError(
                f"shape mismatch: {self.spec.layer_dims} vs {other.spec.layer_dims}")


class Parameters(_LayerVectors):
    """Model weights ``w``; immutable."""

    def weights(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        ls = self.spec.layers[layer]
        vec = self.per_layer[layer]
        k = ls.fan_in * ls.fan_out
        return vec[:k].reshape(ls.fan_in, ls.fan_out), vec[k:]


class Update(_LayerVectors):
    """Difference between two parameter sets, same layout as Parameters."""

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "Update":
        return cls(spec, tuple(np.zeros(d, np.float32) for d in spec.layer_dims))


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 2
    learning_rate: float = 0.05
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise InputError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")


def init_model(spec: ModelSpec, seed: int) -> Parameters:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    per_layer = []
    for ls in spec.layers:
        limit = math.sqrt(6.0 / (ls.fan_in + ls.fan_out))
        w = rng.uniform(-limit, limit, size=ls.fan_in * ls.fan_out)
        per_layer.append(np.concatenate([w, np.zeros(ls.fan_out)]).astype(np.float32))
    return Parameters(spec, tuple(per_layer))


def _check_batch(spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise InputError(f"features must have shape (n, {spec.input_dim}), got {x.shape}")
    if y.shape != (x.shape[0],):
        raise InputError(f"labels must have shape ({x.shape[0]},), got {y.shape}")
    if x.shape[0] == 0:
        raise InputError("batch is empty")
    if y.min() < 0 or y.max() >= spec.class_count:
        raise InputError("label out of range")
    return x.astype(np.float64, copy=False), y.astype(np.intp, copy=False)


def _forward(params: Parameters, x: np.ndarray):
    acts = [x]
    h = x
    for i, ls in enumerate(params.spec.layers):
        w, b = params.weights(i)
        z = h @ w.astype(np.float64) + b.astype(np.float64)
        h = np.maximum(z, 0.0) if ls.activation == "relu" else z
        acts.append(h)
    return acts


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(params: Parameters, x: np.ndarray, y: np.ndarray) -> tuple[float, Update]:
    """Mean cross-entropy over the batch and its gradient."""
    spec = params.spec
    x, y = _check_batch(spec, x, y)
    n = x.shape[0]
    acts = _forward(params, x)
    logp = _log_softmax(acts[-1])
    loss = float(-logp[np.arange(n), y].mean())

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads: list[np.ndarray] = [None] * len(spec.layers)  # type: ignore[list-item]
    for i in range(len(spec.layers) - 1, -1, -1):
        h_in = acts[i]
        grads[i] = np.concatenate([(h_in.T @ dz).ravel(), dz.sum(axis=0)])
        if i > 0:
            w, _ = params.weights(i)
            dz = (dz @ w.T.astype(np.float64)) * (acts[i] > 0)
    return loss, Update(spec, tuple(grads))


def predict(params: Parameters, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _forward(params, x)[-1].argmax(axis=1)


def evaluate(params: Parameters, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Return ``(mean cross-entropy, accuracy)``."""
    x, y = _check_batch(params.spec, x, y)
    logits = _forward(params, x)[-1]
    loss = float(-_log_softmax(logits)[np.arange(len(y)), y].mean())
    acc = float((logits.argmax(axis=1) == y).mean())
    return loss, acc


def sgd_step(params: Parameters, grad: Update, learning_rate: float) -> Parameters:
    lr = np.float32(learning_rate)
    return Parameters(params.spec, tuple(
        p - lr * g for p, g in zip(params.per_layer, grad.per_layer)))


def local_train(params: Parameters, x: np.ndarray, y: np.ndarray, cfg: LocalTrainConfig,
                loss_history: list[float] | None = None) -> Parameters:
    """Mini-batch SGD for ``cfg.epochs`` epochs; batch order reshuffled every epoch.

    The last partial batch is kept. ``params`` itself is never modified. If
    ``loss_history`` is given, the mean batch loss of each epoch is appended.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise InputError("client dataset is empty")
    _check_batch(params.spec, x, y)
    if cfg.learning_rate == 0:
        return params
    rng = np.random.default_rng(cfg.seed)
    cur = params
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad = loss_and_grad(cur, x[idx], y[idx])
            losses.append(loss)
            cur = sgd_step(cur, grad, cfg.learning_rate)
        if loss_history is not None:
            loss_history.append(float(np.mean(losses)))
    out = cur
    if not out.is_finite():
        raise TrainingDivergedError("non-finite parameters after local training")
    return out


def compute_update(local: Parameters, global_: Parameters) -> Update:
    local._check_shape(global_)
    return Update(local.spec, tuple(a - b for a, b in zip(local.per_layer, global_.per_layer)))


def apply_update(params: Parameters, update: Update, scale: float = 1.0) -> Parameters:
    params._check_shape(update)
    return Parameters(params.spec, tuple(
        (p.astype(np.float64) + scale * u.astype(np.float64)).astype(np.float32)
        for p, u in zip(params.per_layer, update.per_layer)))
