"""LSTM architecture generator conditioned on a target complexity.

Given a target resource ``C`` the generator emits one candidate choice per
operation, in order.  The normalised target is embedded as the first LSTM
input; every later step is fed the embedding of the choice just made plus
the target embedding again, so the condition does not fade.  Each
choice is drawn with Gumbel-Softmax so that, in hard (straight-through)
mode, the supernet sees an exact one-hot policy while gradients reach the
generator through the relaxed sample.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Parameter, Value, as_value, no_grad, sigmoid, softmax, straight_through, tanh
from .errors import ContractError
from .space import ResourceBinning, SearchSpace, SubnetPolicy, build_policy

HIDDEN = 64


def gumbel_softmax(logits, tau: float = 1.0, rng: np.random.Generator | None = None, hard: bool = True,
                   noise: np.ndarray | None = None) -> Value:
    """Relaxed categorical sample ``softmax((logits + g) / tau)``.

    With ``hard`` the forward value is the one-hot argmax (first index on
    ties) and the gradient is that of the relaxed sample.  ``noise`` fixes
    the Gumbel draw ``g``; otherwise it comes from ``rng``.
    """
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = as_value(logits)
    if noise is None:
        if rng is None:
            raise ContractError("gumbel_softmax needs either rng or noise")
        noise = rng.gumbel(size=logits.shape)
    soft = softmax((logits + np.asarray(noise, dtype=np.float64)) * (1.0 / tau))
    if not hard:
        return soft
    onehot = np.zeros(soft.shape)
    onehot[np.argmax(soft.data)] = 1.0
    return straight_through(soft, onehot)


def rc_loss(policy: SubnetPolicy, target, binning: ResourceBinning | None = None) -> Value:
    """Squared gap between the policy's resource and ``target``.

    With a binning both sides are normalised to [0, 1] over its range first.
    """
    resource = policy.resource
    if binning is not None:
        gap = binning.normalize(resource) - binning.normalize(target)
    else:
        gap = resource - target
    return gap * gap


def joint_loss(task: Value, rc: Value, lam: float) -> Value:
    return task + rc * lam


class ArchitectureGenerator:
    """LSTM cell plus one linear head per searched operation."""

    def __init__(self, space: SearchSpace, binning: ResourceBinning, rng: np.random.Generator,
                 hidden: int = HIDDEN, tau: float = 1.0):
        if not tau > 0:
            raise ContractError("generator temperature must be positive")
        self.space = space
        self.binning = binning
        self.hidden = hidden
        self.tau = tau
        self.condition_every_step = True
        bound = 1.0 / np.sqrt(hidden)

        def init(shape, name):
            return Parameter(rng.uniform(-bound, bound, shape), f"ag.{name}")

        self.embed_weight = init(hidden, "embed.weight")
        self.embed_bias = init(hidden, "embed.bias")
        self.w_input = init((hidden, 4 * hidden), "lstm.w_input")
        self.w_hidden = init((hidden, 4 * hidden), "lstm.w_hidden")
        self.lstm_bias = init(4 * hidden, "lstm.bias")
        self.heads = [(init((hidden, op.n), f"head{d}.weight"), init(op.n, f"head{d}.bias"))
                      for d, op in enumerate(space.ops)]
        self.choice_embeds = [init((op.n, hidden), f"choice{d}.embed") for d, op in enumerate(space.ops)]

    def parameters(self) -> list[Parameter]:
        params = [self.embed_weight, self.embed_bias, self.w_input, self.w_hidden, self.lstm_bias]
        for w, b in self.heads:
            params += [w, b]
        return params + list(self.choice_embeds)

    def _cell(self, x: Value, h: Value, c: Value) -> tuple[Value, Value]:
        H = self.hidden
        z = x @ self.w_input + h @ self.w_hidden + self.lstm_bias
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        o = sigmoid(z[:, 2 * H:3 * H])
        g = tanh(z[:, 3 * H:])
        c = f * c + i * g
        return o * tanh(c), c

    def _next_input(self, p: Value, d: int, cond: Value) -> Value:
        x = (p @ self.choice_embeds[d]).reshape(1, self.hidden)
        return x + cond if self.condition_every_step else x

    def draw_noise(self, rng: np.random.Generator) -> list[np.ndarray]:
        return [rng.gumbel(size=op.n) for op in self.space.ops]

    def generate(self, target, rng: np.random.Generator | None = None, hard: bool = True,
                 noise: Sequence[np.ndarray] | None = None, argmax: bool = False) -> SubnetPolicy:
        """Emit a policy for target resource ``target`` (cost-units).

        ``target`` may be a Value so gradients flow back into whatever
        produced it.  ``argmax`` disables the noise and takes the most
        probable candidate at every step.
        """
        target_value = float(as_value(target).item())
        if not self.binning.contains(target_value):
            raise ContractError(
                f"target {target_value} outside [{self.binning.lo}, {self.binning.hi}]")
        if noise is None and not argmax:
            if rng is None:
                raise ContractError("generate needs rng or frozen noise")
            noise = self.draw_noise(rng)
        H = self.hidden
        cond = (self.binning.normalize(target) * self.embed_weight + self.embed_bias).reshape(1, H)
        x = cond
        h = Value(np.zeros((1, H)))
        c = Value(np.zeros((1, H)))
        onehots = []
        for d, op in enumerate(self.space.ops):
            h, c = self._cell(x, h, c)
            w, b = self.heads[d]
            logits = (h @ w).reshape(op.n) + b
            if argmax:
                p = Value(np.eye(op.n)[int(np.argmax(logits.data))])
            else:
                p = gumbel_softmax(logits, self.tau, hard=hard, noise=noise[d])
            onehots.append(p)
            x = self._next_input(p, d, cond)
        return build_policy(self.space, onehots, strict=hard or argmax)

    __call__ = generate

    def probabilities(self, target) -> list[np.ndarray]:
        """Per-step candidate probabilities along the argmax path."""
        with no_grad():
            H = self.hidden
            cond = (self.binning.normalize(float(target)) * self.embed_weight + self.embed_bias).reshape(1, H)
            x = cond
            h = Value(np.zeros((1, H)))
            c = Value(np.zeros((1, H)))
            out = []
            for d, op in enumerate(self.space.ops):
                h, c = self._cell(x, h, c)
                w, b = self.heads[d]
                probs = softmax((h @ w).reshape(op.n) + b).data
                out.append(probs)
                x = self._next_input(Value(np.eye(op.n)[int(np.argmax(probs))]), d, cond)
        return out


def extract_argmax(gen: ArchitectureGenerator, target: float) -> SubnetPolicy:
    """Deterministic architecture for ``target``: most probable choice per step."""
    with no_grad():
        return gen.generate(target, argmax=True)
