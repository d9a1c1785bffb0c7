"""Desk-scale classifiers split into a backbone and a linear head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..errors import ConfigurationError, ContractError, InputError, ShapeError
from . import tape as T

BACKBONE = "backbone"
HEAD = "head"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``mlp``: input -> tanh(hidden_width) -> num_classes.
    ``smallcnn``: two (3x3 conv, ReLU, 2x2 maxpool) blocks, then an optional
    ReLU projection of width ``hidden_width`` (0 disables it), then the head.
    """

    kind: str
    input_dims: tuple
    num_classes: int
    hidden_width: int = 64
    channels: tuple = (8, 16)

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in ("mlp", "smallcnn"):
            raise ConfigurationError(f"unknown model kind {self.kind!r}", key="kind")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2", key="num_classes")
        if not self.input_dims or any(d < 1 for d in self.input_dims):
            raise ConfigurationError(f"bad input dims {self.input_dims}", key="input_dims")
        if self.kind == "mlp":
            if self.hidden_width < 1:
                raise ConfigurationError("hidden_width must be >= 1", key="hidden_width")
        else:
            if len(self.input_dims) != 3:
                raise ConfigurationError("smallcnn needs (channels, height, width) input", key="input_dims")
            _, h, w = self.input_dims
            if h % 4 or w % 4:
                raise ConfigurationError("smallcnn input height/width must be multiples of 4", key="input_dims")
            if len(self.channels) != 2 or min(self.channels) < 1:
                raise ConfigurationError("smallcnn needs two positive channel counts", key="channels")
            if self.hidden_width < 0:
                raise ConfigurationError("hidden_width must be >= 0", key="hidden_width")

    @property
    def flat_input(self) -> int:
        return int(np.prod(self.input_dims))

    @property
    def conv_flat(self) -> int:
        _, h, w = self.input_dims
        return self.channels[1] * (h // 4) * (w // 4)

    @property
    def hidden_dim(self) -> int:
        """Width ``d`` of the backbone output."""
        if self.kind == "mlp":
            return self.hidden_width
        return self.hidden_width or self.conv_flat

    def layout(self) -> list[tuple[str, tuple, str, int]]:
        """(name, dims, role, fan_in) for every tensor, in canonical order."""
        c = self.num_classes
        d = self.hidden_dim
        if self.kind == "mlp":
            n_in = self.flat_input
            return [
                ("backbone.w", (d, n_in), BACKBONE, n_in),
                ("backbone.b", (d,), BACKBONE, n_in),
                ("head.w", (c, d), HEAD, d),
                ("head.b", (c,), HEAD, d),
            ]
        cin = self.input_dims[0]
        c1, c2 = self.channels
        out = [
            ("backbone.conv1.w", (c1, cin, 3, 3), BACKBONE, cin * 9),
            ("backbone.conv1.b", (c1,), BACKBONE, cin * 9),
            ("backbone.conv2.w", (c2, c1, 3, 3), BACKBONE, c1 * 9),
            ("backbone.conv2.b", (c2,), BACKBONE, c1 * 9),
        ]
        if self.hidden_width:
            out += [
                ("backbone.fc.w", (self.hidden_width, self.conv_flat), BACKBONE, self.conv_flat),
                ("backbone.fc.b", (self.hidden_width,), BACKBONE, self.conv_flat),
            ]
        out += [("head.w", (c, d), HEAD, d), ("head.b", (c,), HEAD, d)]
        return out


@dataclass
class Param:
    name: str
    value: np.ndarray
    role: str


@dataclass
class ModelParams:
    spec: ModelSpec
    entries: list[Param] = field(default_factory=list)

    def __iter__(self) -> Iterator[Param]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        for p in self.entries:
            if p.name == name:
                return p.value
        raise KeyError(name)

    def names(self) -> list[str]:
        return [p.name for p in self.entries]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.entries}

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, [Param(p.name, p.value.copy(), p.role) for p in self.entries])

    def replace(self, values: dict[str, np.ndarray]) -> "ModelParams":
        """New params with the given tensors swapped in (copied)."""
        out = []
        for p in self.entries:
            v = values.get(p.name, p.value)
            if v.shape != p.value.shape:
                raise ShapeError(f"{p.name}: expected {p.value.shape}, got {v.shape}")
            out.append(Param(p.name, np.array(v, dtype=np.float64), p.role))
        return ModelParams(self.spec, out)

    def add(self, delta: dict[str, np.ndarray]) -> "ModelParams":
        return self.replace({p.name: p.value + delta[p.name] for p in self.entries})

    def sub(self, other: "ModelParams") -> dict[str, np.ndarray]:
        return {p.name: p.value - other[p.name] for p in self.entries}

    def equals(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(p.value, other[p.name]) for p in self.entries
        )


@dataclass
class ForwardOutput:
    hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def build_model(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    entries = []
    for name, dims, role, fan_in in spec.layout():
        bound = np.sqrt(1.0 / fan_in)
        entries.append(Param(name, rng.uniform(-bound, bound, size=dims), role))
    return ModelParams(spec, entries)


def zeros_like_model(spec: ModelSpec) -> ModelParams:
    return ModelParams(spec, [Param(n, np.zeros(d), r) for n, d, r, _ in spec.layout()])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim < 2:
        raise ShapeError(f"batch must have a leading batch axis, got shape {batch.shape}")
    if spec.kind == "mlp":
        if int(np.prod(batch.shape[1:])) != spec.flat_input:
            raise ShapeError(f"expected {spec.input_dims} per sample, got {batch.shape[1:]}")
        return batch.reshape(batch.shape[0], -1)
    if tuple(batch.shape[1:]) != spec.input_dims:
        raise ShapeError(f"expected {spec.input_dims} per sample, got {batch.shape[1:]}")
    return batch


def forward(params: ModelParams, batch: np.ndarray) -> ForwardOutput:
    """Plain numpy forward pass (no gradient recording)."""
    spec = params.spec
    x = _check_batch(spec, batch)
    p = params.as_dict()
    if spec.kind == "mlp":
        h = np.tanh(x @ p["backbone.w"].T + p["backbone.b"])
    else:
        a = np.maximum(T.conv2d_value(x, p["backbone.conv1.w"], p["backbone.conv1.b"]), 0.0)
        a = T.maxpool2_value(a)
        a = np.maximum(T.conv2d_value(a, p["backbone.conv2.w"], p["backbone.conv2.b"]), 0.0)
        a = T.maxpool2_value(a)
        h = a.reshape(a.shape[0], -1)
        if spec.hidden_width:
            h = np.maximum(h @ p["backbone.fc.w"].T + p["backbone.fc.b"], 0.0)
    logits = h @ p["head.w"].T + p["head.b"]
    return ForwardOutput(h, logits, softmax(logits))


@dataclass
class TapeForward:
    hidden: T.Node
    logits: T.Node
    probs: T.Node


def forward_on_tape(tape: T.Tape, params: ModelParams, batch: np.ndarray, prefix: str = "") -> TapeForward:
    """Recorded forward pass; parameters are registered as ``prefix + name``."""
    spec = params.spec
    x = tape.const(_check_batch(spec, batch))
    p = {e.name: tape.param(prefix + e.name, e.value) for e in params}
    if spec.kind == "mlp":
        h = T.tanh(T.linear(x, p["backbone.w"], p["backbone.b"]))
    else:
        a = T.maxpool2(T.relu(T.conv2d(x, p["backbone.conv1.w"], p["backbone.conv1.b"])))
        a = T.maxpool2(T.relu(T.conv2d(a, p["backbone.conv2.w"], p["backbone.conv2.b"])))
        h = T.reshape(a, (a.shape[0], -1))
        if spec.hidden_width:
            h = T.relu(T.linear(h, p["backbone.fc.w"], p["backbone.fc.b"]))
    logits = T.linear(h, p["head.w"], p["head.b"])
    return TapeForward(h, logits, T.softmax(logits))


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> ModelParams:
    missing = [n for n in params.names() if n not in grads]
    if missing:
        raise ContractError(f"no gradient for {missing}")
    return params.replace({p.name: p.value - lr * grads[p.name] for p in params})


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return labels


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean of ``-ln(max(p[i, y_i], 1e-12))`` over the batch."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[1])
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, T.PROB_EPS)).mean())


def cross_entropy_node(probs: T.Node, labels) -> T.Node:
    labels = _check_labels(labels, probs.shape[1])
    return T.scale(T.mean(T.log_clamped(T.pick(probs, labels))), -1.0)


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    pred = forward(params, x).logits.argmax(axis=1)
    return float((pred == np.asarray(y)).mean())
