"""Learnable sampling distribution over complexity bins.

Bins are drawn with Gumbel-Softmax so the sampled target complexity stays
differentiable in the bin logits.  Every ``q`` training steps the logits are
moved along the finite-difference signal

    grad_B = dL_val(w_prev)/dB - dL_val(w_curr)/dB,

the B-gradient of the validation-loss improvement between two weight
snapshots, evaluated on one frozen draw (same bin, same subnet, same batch).
The logits take an ascent step on that improvement, so bins whose subnets
are still improving get sampled more.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Adam, Parameter, Value, backward, softmax, straight_through, zero_grad
from .errors import ContractError
from .space import ResourceBinning
from .supernet import WeightSnapshot


@dataclass
class BinSample:
    index: int
    center: float
    onehot: Value  # straight-through one-hot over bins
    target: Value  # differentiable bin center, equal to ``center`` in value


class SamplingDistribution:
    """Softmax-parameterised distribution over the bins of ``binning``."""

    def __init__(self, binning: ResourceBinning, tau: float = 1.0, lr: float = 1e-3):
        if not tau > 0:
            raise ContractError("bin temperature must be positive")
        self.binning = binning
        self.tau = tau
        self.logits = Parameter(np.zeros(binning.k), "dist.logits")
        self.optimizer = Adam([self.logits], lr=lr)
        self.t = 0

    @property
    def probabilities(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max()
        e = np.exp(z)
        return e / e.sum()

    def draw_noise(self, rng: np.random.Generator) -> np.ndarray:
        return rng.gumbel(size=self.binning.k)

    def sample_bin(self, rng: np.random.Generator | None = None, noise: np.ndarray | None = None,
                   hard: bool = True) -> BinSample:
        """Gumbel-max bin index plus the relaxed sample carrying the gradient."""
        if noise is None:
            if rng is None:
                raise ContractError("sample_bin needs rng or noise")
            noise = self.draw_noise(rng)
        soft = softmax((self.logits + np.asarray(noise, dtype=np.float64)) * (1.0 / self.tau))
        index = int(np.argmax(soft.data))
        if hard:
            onehot = np.zeros(self.binning.k)
            onehot[index] = 1.0
            soft = straight_through(soft, onehot)
        centers = self.binning.centers
        target = (soft * centers).sum()
        return BinSample(index, float(centers[index]), soft, target)

    def state_dict(self) -> dict:
        state = {"dist.logits": self.logits.data.copy(), "dist.t": np.array(float(self.t))}
        state.update({f"dist.opt.{k}": v for k, v in self.optimizer.state_dict().items()})
        return state

    def load_state_dict(self, state: dict) -> None:
        self.logits.data = np.array(state["dist.logits"], dtype=np.float64)
        self.t = int(state["dist.t"])
        self.optimizer.load_state_dict({k[len("dist.opt."):]: v for k, v in state.items() if k.startswith("dist.opt.")})


class PinnedDistribution:
    """Sampling-only view of a distribution; updates through it are refused."""

    def __init__(self, dist: SamplingDistribution):
        self._dist = dist

    @property
    def binning(self) -> ResourceBinning:
        return self._dist.binning

    @property
    def probabilities(self) -> np.ndarray:
        return self._dist.probabilities

    def draw_noise(self, rng):
        return self._dist.draw_noise(rng)

    def sample_bin(self, rng=None, noise=None, hard=True) -> BinSample:
        return self._dist.sample_bin(rng, noise, hard)

    def unpin(self) -> SamplingDistribution:
        return self._dist

    @property
    def logits(self):
        raise ContractError("a pinned distribution does not expose trainable logits")


def pin_distribution(dist: SamplingDistribution) -> PinnedDistribution:
    return PinnedDistribution(dist)


@dataclass
class UpdateContext:
    """Everything held fixed across the two passes of one update."""

    w_prev: WeightSnapshot | None
    w_curr: WeightSnapshot | None
    val_batch: tuple[np.ndarray, np.ndarray]
    bin_noise: np.ndarray
    arch_noise: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def draw(cls, w_prev, w_curr, val_batch, dist, gen, rng: np.random.Generator) -> "UpdateContext":
        return cls(w_prev, w_curr, val_batch, dist.draw_noise(rng), gen.draw_noise(rng))


@dataclass
class UpdateResult:
    grad: np.ndarray  # grad_B = grad at w_prev - grad at w_curr
    bin_index: int
    center: float
    loss_prev: float
    loss_curr: float


def finite_difference_update(dist: SamplingDistribution, loss_at: Callable[[str, BinSample], Value],
                             bin_noise: np.ndarray, optimizer=None) -> UpdateResult:
    """Two-pass update of ``dist`` from ``loss_at("prev"|"curr", sample)``.

    Both passes reuse ``bin_noise``, so they see the same bin.
    """
    if isinstance(dist, PinnedDistribution):
        raise ContractError("cannot update a pinned distribution")
    optimizer = optimizer or dist.optimizer
    grads, losses = {}, {}
    sample = None
    for phase in ("prev", "curr"):
        dist.logits.grad = None
        sample = dist.sample_bin(noise=bin_noise)
        loss = loss_at(phase, sample)
        backward(loss)
        grads[phase] = np.zeros(dist.binning.k) if dist.logits.grad is None else dist.logits.grad.copy()
        losses[phase] = loss.item()
    grad_b = grads["prev"] - grads["curr"]
    # ascend on the improvement: descend on its negation
    dist.logits.grad = -grad_b
    optimizer.step()
    dist.logits.grad = None
    dist.t += 1
    return UpdateResult(grad_b, sample.index, sample.center, losses["prev"], losses["curr"])


def distribution_update(dist: SamplingDistribution, ctx: UpdateContext, supernet, gen, optimizer=None) -> UpdateResult:
    """Update ``dist`` from the snapshots in ``ctx``; leaves the supernet at ``w_curr``."""
    if isinstance(dist, PinnedDistribution):
        raise ContractError("cannot update a pinned distribution")
    if ctx.w_prev is None or ctx.w_curr is None:
        raise ContractError("distribution update needs both weight snapshots")
    x, y = ctx.val_batch
    params = supernet.parameters() + gen.parameters()

    def loss_at(phase: str, sample: BinSample) -> Value:
        supernet.restore(ctx.w_prev if phase == "prev" else ctx.w_curr)
        policy = gen.generate(sample.target, noise=ctx.arch_noise, hard=True)
        return supernet.task_loss(x, y, policy)

    try:
        return finite_difference_update(dist, loss_at, ctx.bin_noise, optimizer)
    finally:
        supernet.restore(ctx.w_curr)
        zero_grad(params)
