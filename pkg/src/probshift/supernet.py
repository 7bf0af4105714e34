"""Weight-entangled MLP supernet.

Each hidden layer owns one full-width weight store.  A subnet uses the
lowest-index rows and columns, which is realised by multiplying the layer's
activations with the mask selected by its policy.  Masked-out units output
exactly zero, so the next layer sees zero input columns for them and the
masked forward equals a physically sliced network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Value, as_value, no_grad, relu, softmax_cross_entropy
from .errors import CheckpointError, ShapeError
from .space import SearchSpace, SubnetPolicy, policy_from_choices


class EntangledLayer:
    """Affine map whose output width is governed by operation ``op_index``."""

    def __init__(self, in_units: int, out_units: int, op_index: int | None, rng: np.random.Generator, name: str):
        bound = 1.0 / np.sqrt(in_units)
        # He-uniform for the ReLU layers; the head keeps the smaller default range
        w_bound = np.sqrt(6.0 / in_units) if op_index is not None else bound
        self.weight = Parameter(rng.uniform(-w_bound, w_bound, (in_units, out_units)), f"{name}.weight")
        self.bias = Parameter(rng.uniform(-bound, bound, out_units), f"{name}.bias")
        self.op_index = op_index

    def __call__(self, h: Value) -> Value:
        return h @ self.weight + self.bias

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


@dataclass
class WeightSnapshot:
    """Deep copy of named parameter arrays."""

    arrays: dict[str, np.ndarray]

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightSnapshot) or self.arrays.keys() != other.arrays.keys():
            return False
        return all(np.array_equal(a, other.arrays[k]) for k, a in self.arrays.items())


def snapshot_params(params) -> WeightSnapshot:
    return WeightSnapshot({p.name: p.data.copy() for p in params})


def restore_params(params, snap: WeightSnapshot) -> None:
    params = list(params)
    names = {p.name for p in params}
    missing = sorted(names - snap.arrays.keys())
    unexpected = sorted(snap.arrays.keys() - names)
    if missing or unexpected:
        raise CheckpointError(f"parameter names differ: missing={missing} unexpected={unexpected}")
    for p in params:
        arr = snap.arrays[p.name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{p.name}: shape {arr.shape} != {p.shape}")
    for p in params:
        p.data = np.array(snap.arrays[p.name], dtype=np.float64)


class Supernet:
    """Over-parameterised MLP covering every architecture of ``space``."""

    def __init__(self, space: SearchSpace, n_features: int, n_classes: int, rng: np.random.Generator):
        self.space = space
        self.n_features = n_features
        self.n_classes = n_classes
        self.layers: list[EntangledLayer] = []
        in_units = n_features
        for d, op in enumerate(space.ops):
            self.layers.append(EntangledLayer(in_units, op.max_units, d, rng, f"supernet.layer{d}"))
            in_units = op.max_units
        self.head = EntangledLayer(in_units, n_classes, None, rng, "supernet.head")

    def parameters(self) -> list[Parameter]:
        params = [p for layer in self.layers for p in layer.parameters()]
        return params + self.head.parameters()

    def forward(self, x, policy: SubnetPolicy) -> Value:
        x = as_value(x)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeError(f"expected inputs of shape (batch, {self.n_features}), got {x.shape}")
        if len(policy.masks) != len(self.layers):
            raise ShapeError(f"policy has {len(policy.masks)} masks for {len(self.layers)} layers")
        h = x
        for layer, op, mask, onehot in zip(self.layers, self.space.ops, policy.masks, policy.onehots):
            z = relu(layer(h)) * mask
            # onehot[0] of a skippable op selects the bypass
            h = z + h * onehot[0] if op.skippable else z
        return self.head(h)

    __call__ = forward

    def task_loss(self, x, labels, policy: SubnetPolicy) -> Value:
        return softmax_cross_entropy(self.forward(x, policy), np.asarray(labels))

    def evaluate(self, x, labels, policy: SubnetPolicy) -> tuple[float, float]:
        """(accuracy in [0, 1], mean cross-entropy) without building a graph."""
        with no_grad():
            logits = self.forward(x, policy)
            loss = softmax_cross_entropy(logits, np.asarray(labels)).item()
        acc = float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(labels)))
        return acc, loss

    def snapshot(self) -> WeightSnapshot:
        return snapshot_params(self.parameters())

    def restore(self, snap: WeightSnapshot) -> None:
        restore_params(self.parameters(), snap)

    def extract(self, choices) -> "StandaloneMLP":
        return slice_subnet(self, choices)


class StandaloneMLP:
    """A deployable subnet holding copies of the sliced supernet weights."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = weights
        self.biases = biases

    def forward(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return h @ self.weights[-1] + self.biases[-1]

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=1)


def slice_subnet(supernet: Supernet, choices) -> StandaloneMLP:
    """Copy the active rows and columns of ``choices`` into a plain MLP.

    Bypassed layers (width 0 on a skippable operation) are dropped.
    """
    widths = supernet.space.widths(choices)
    weights, biases = [], []
    prev = supernet.n_features
    for layer, width in zip(supernet.layers, widths):
        if width == 0:
            continue
        weights.append(layer.weight.data[:prev, :width].copy())
        biases.append(layer.bias.data[:width].copy())
        prev = width
    weights.append(supernet.head.weight.data[:prev, :].copy())
    biases.append(supernet.head.bias.data.copy())
    return StandaloneMLP(weights, biases)


def full_policy(space: SearchSpace) -> SubnetPolicy:
    return policy_from_choices(space, [op.n - 1 for op in space.ops])
