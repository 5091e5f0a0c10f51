"""Small multilayer perceptron with explicit forward/backward passes.

ReLU hidden layers, softmax output, mean cross-entropy against one-hot or
soft probability targets. Models are value-semantic: operations return new
models and never mutate their inputs, so a model can be shared freely across
simulated clients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EmptyInputError, FormatError, ShapeError
from .numkernel import SeededRng, as_matrix

SOFT_LABEL_FLOOR = 1e-12

_HEADER = struct.Struct("<Q")


@dataclass
class SgdConfig:
    """Plain SGD schedule: constant learning rate, fixed number of updates."""

    learning_rate: float
    batch_size: int
    steps: int

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.steps < 0:
            raise DomainError(f"steps must be nonnegative, got {self.steps}")


@dataclass
class GradientSet:
    """Per-parameter gradients, shaped exactly like the model's parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_bytes(self) -> bytes:
        """Serialize as a little-endian header (layer sizes) plus flat float64 params."""
        sizes = self.layer_sizes()
        parts = [_HEADER.pack(len(sizes))]
        parts.extend(_HEADER.pack(s) for s in sizes)
        for w, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MlpModel":
        if len(data) < _HEADER.size:
            raise FormatError("truncated model header", offset=len(data))
        (n_sizes,) = _HEADER.unpack_from(data, 0)
        offset = _HEADER.size
        if n_sizes < 2:
            raise FormatError(f"model needs at least 2 layer sizes, got {n_sizes}", offset=0)
        need = offset + n_sizes * _HEADER.size
        if len(data) < need:
            raise FormatError("truncated layer size table", offset=len(data))
        sizes = []
        for _ in range(n_sizes):
            (s,) = _HEADER.unpack_from(data, offset)
            sizes.append(int(s))
            offset += _HEADER.size
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            n_bytes = (fan_in * fan_out + fan_out) * 8
            if len(data) < offset + n_bytes:
                raise FormatError("truncated parameter block", offset=len(data))
            w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=offset)
            offset += fan_in * fan_out * 8
            b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
            offset += fan_out * 8
            weights.append(w.reshape(fan_in, fan_out).astype(np.float64))
            biases.append(b.astype(np.float64))
        if offset != len(data):
            raise FormatError("trailing bytes after parameter block", offset=offset)
        return cls(weights, biases)


def init_mlp(layer_sizes, rng: SeededRng) -> MlpModel:
    """Uniform Glorot weight init in +-sqrt(6/(fan_in+fan_out)); zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise DomainError(f"layer sizes must be >= 1 with >= 2 layers, got {sizes}")
    gen = rng.generator()
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(gen.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_cached(m: MlpModel, x: np.ndarray):
    """Forward pass keeping layer activations for backprop."""
    acts = [x]
    h = x
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w + b
        h = _softmax(z) if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(m: MlpModel, x) -> np.ndarray:
    """Softmax class probabilities for each row of x."""
    x = as_matrix(x, "x")
    if x.shape[1] != m.weights[0].shape[0]:
        raise ShapeError(f"input dim {x.shape[1]} != model input {m.weights[0].shape[0]}")
    return _forward_cached(m, x)[-1]


def backward(m: MlpModel, x, y) -> GradientSet:
    """Gradients of mean cross-entropy over the batch w.r.t. all parameters."""
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"x has {x.shape[0]} rows, y has {y.shape[0]}")
    if x.shape[1] != m.weights[0].shape[0]:
        raise ShapeError(f"input dim {x.shape[1]} != model input {m.weights[0].shape[0]}")
    if y.shape[1] != m.weights[-1].shape[1]:
        raise ShapeError(f"target dim {y.shape[1]} != model output {m.weights[-1].shape[1]}")
    acts = _forward_cached(m, x)
    n = x.shape[0]
    delta = (acts[-1] - y) / n
    grad_w = [None] * len(m.weights)
    grad_b = [None] * len(m.biases)
    for i in range(len(m.weights) - 1, -1, -1):
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ m.weights[i].T) * (acts[i] > 0.0)
    return GradientSet(grad_w, grad_b)


def sgd_step(m: MlpModel, g: GradientSet, eta: float) -> MlpModel:
    """One gradient descent update; returns a new model."""
    if len(g.weights) != len(m.weights):
        raise ShapeError("gradient layer count does not match model")
    for w, gw in zip(m.weights, g.weights):
        if w.shape != gw.shape:
            raise ShapeError(f"gradient shape {gw.shape} != weight shape {w.shape}")
    return MlpModel(
        [w - eta * gw for w, gw in zip(m.weights, g.weights)],
        [b - eta * gb for b, gb in zip(m.biases, g.biases)],
    )


def iter_batches(n_rows: int, batch_size: int, gen: np.random.Generator):
    """Yield index batches without replacement per cycle, reshuffling each cycle.

    The final batch of a cycle may be short; nothing is dropped. The generator
    is infinite, so callers take exactly as many batches as they need.
    """
    while True:
        perm = gen.permutation(n_rows)
        for start in range(0, n_rows, batch_size):
            yield perm[start : start + batch_size]


def local_train(m: MlpModel, d, cfg: SgdConfig, rng: SeededRng) -> MlpModel:
    """Run cfg.steps mini-batch SGD updates on dataset d; pure in all inputs."""
    if d.n_rows() == 0:
        raise EmptyInputError("cannot train on an empty dataset")
    if cfg.steps == 0:
        return m
    gen = rng.generator()
    batches = iter_batches(d.n_rows(), cfg.batch_size, gen)
    out = m
    for _ in range(cfg.steps):
        idx = next(batches)
        g = backward(out, d.features[idx], d.labels[idx])
        out = sgd_step(out, g, cfg.learning_rate)
    return out


def soft_labels(m: MlpModel, dg) -> np.ndarray:
    """Class probabilities on every probe row, clamped to [1e-12, 1].

    Clamping happens after the softmax and is not renormalized; row sums stay
    within 1e-9 of one, which downstream divergence code relies on.
    """
    if dg.n_rows() == 0:
        raise EmptyInputError("probe dataset is empty")
    p = forward(m, dg.features)
    return np.clip(p, SOFT_LABEL_FLOOR, 1.0)


def cross_entropy(probs, y) -> float:
    """Mean cross-entropy of predicted probabilities against target rows."""
    probs = as_matrix(probs, "probs")
    y = as_matrix(y, "y")
    if probs.shape != y.shape:
        raise ShapeError(f"probs shape {probs.shape} != targets shape {y.shape}")
    p = np.clip(probs, SOFT_LABEL_FLOOR, 1.0)
    return float(-(y * np.log(p)).sum() / probs.shape[0])


def dataset_loss(m: MlpModel, d) -> float:
    return cross_entropy(forward(m, d.features), d.labels)


def accuracy(m: MlpModel, d) -> float:
    """Top-1 accuracy against the argmax of the label rows."""
    if d.n_rows() == 0:
        raise EmptyInputError("cannot evaluate on an empty dataset")
    pred = np.argmax(forward(m, d.features), axis=1)
    truth = np.argmax(d.labels, axis=1)
    return float(np.mean(pred == truth))
