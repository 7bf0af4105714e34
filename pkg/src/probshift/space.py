"""Search spaces, weight-entanglement masks and subnet resource accounting.

A search space is a sequence of operations.  Operation ``d`` picks one of
``n_d`` ordered unit counts (hidden widths here).  Candidate ``i`` activates
the lowest ``candidates[i]`` units, so masks are nested and the selection of
a candidate is the linear map ``mask = M @ onehot`` with ``M[:, i]`` the mask
of candidate ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .autodiff import Value, as_value, matmul, vsum
from .errors import BudgetExceededError, ContractError

EXACT_BUDGET = 10**7


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Ordered unit-count choices of one operation.

    ``unit_costs[j]`` is the resource charged when unit ``j`` is active.  A
    skippable operation lists 0 as its first candidate; choosing it bypasses
    the block entirely (identity on the residual path).
    """

    candidates: tuple[int, ...]
    unit_costs: np.ndarray
    skippable: bool = False
    name: str = ""

    def __post_init__(self):
        cands = tuple(int(c) for c in self.candidates)
        object.__setattr__(self, "candidates", cands)
        if len(cands) < 2:
            raise ContractError(f"operation {self.name!r} needs at least 2 candidates")
        if any(b <= a for a, b in zip(cands, cands[1:])):
            raise ContractError(f"candidates of {self.name!r} must be strictly increasing: {cands}")
        lowest = 0 if self.skippable else 1
        if cands[0] < lowest:
            raise ContractError(f"candidate {cands[0]} of {self.name!r} is below {lowest}")
        if self.skippable and cands[0] != 0:
            raise ContractError(f"skippable operation {self.name!r} must list 0 first")
        costs = np.broadcast_to(np.asarray(self.unit_costs, dtype=np.float64), (cands[-1],)).copy()
        if np.any(costs < 0) or not np.all(np.isfinite(costs)):
            raise ContractError(f"unit costs of {self.name!r} must be finite and >= 0")
        costs.setflags(write=False)
        object.__setattr__(self, "unit_costs", costs)

    @property
    def n(self) -> int:
        return len(self.candidates)

    @property
    def max_units(self) -> int:
        return self.candidates[-1]

    @cached_property
    def mask_table(self) -> np.ndarray:
        """(max_units, n) matrix whose column ``i`` is the mask of candidate ``i``."""
        units = np.arange(self.max_units)[:, None]
        table = (units < np.asarray(self.candidates)[None, :]).astype(np.float64)
        table.setflags(write=False)
        return table

    def mask(self, i: int) -> np.ndarray:
        return self.mask_table[:, i]

    @cached_property
    def candidate_costs(self) -> np.ndarray:
        costs = self.mask_table.T @ self.unit_costs
        costs.setflags(write=False)
        return costs


@dataclass(frozen=True, eq=False)
class SearchSpace:
    ops: tuple[CandidateSet, ...]
    resource_name: str = "MACs"

    def __post_init__(self):
        ops = tuple(self.ops)
        object.__setattr__(self, "ops", ops)
        if not ops:
            raise ContractError("a search space needs at least one operation")
        for d, op in enumerate(ops):
            if not op.skippable:
                continue
            if d == 0:
                raise ContractError("the first operation cannot be skippable")
            if op.max_units != ops[d - 1].max_units:
                raise ContractError(
                    f"skippable operation {d} must match the width of operation {d - 1} "
                    f"({op.max_units} != {ops[d - 1].max_units})"
                )

    @property
    def depth(self) -> int:
        return len(self.ops)

    @property
    def n_candidates(self) -> tuple[int, ...]:
        return tuple(op.n for op in self.ops)

    @property
    def size(self) -> int:
        return math.prod(self.n_candidates)

    @property
    def min_resource(self) -> float:
        return float(sum(op.candidate_costs.min() for op in self.ops))

    @property
    def max_resource(self) -> float:
        return float(sum(op.candidate_costs.max() for op in self.ops))

    def resource_of(self, choices: Sequence[int]) -> float:
        return float(sum(op.candidate_costs[c] for op, c in zip(self.ops, choices)))

    def widths(self, choices: Sequence[int]) -> tuple[int, ...]:
        return tuple(op.candidates[c] for op, c in zip(self.ops, choices))

    def default_binning(self) -> "ResourceBinning":
        lo, hi = self.min_resource, self.max_resource
        return ResourceBinning(lo, hi, clean_step((hi - lo) / 7))

    def to_dict(self) -> dict:
        return {
            "resource_name": self.resource_name,
            "ops": [
                {
                    "name": op.name,
                    "candidates": list(op.candidates),
                    "unit_cost": op.unit_costs.tolist(),
                    "skippable": op.skippable,
                }
                for op in self.ops
            ],
        }


def toy_space(depth: int = 6, candidates: Sequence[int] = (8, 16, 24), unit_cost: float = 1.0,
              skippable: Sequence[int] = ()) -> SearchSpace:
    """MLP-shaped space of ``depth`` hidden layers sharing one candidate list.

    Layers listed in ``skippable`` additionally accept width 0 (bypass).
    """
    ops = []
    for d in range(depth):
        cands = tuple(candidates)
        if d in skippable:
            cands = (0,) + cands
        ops.append(CandidateSet(cands, np.full(max(cands), float(unit_cost)), skippable=d in skippable,
                                name=f"layer{d}"))
    return SearchSpace(tuple(ops))


def clean_step(raw: float) -> float:
    """Round a positive step to two significant digits."""
    if raw <= 0:
        raise ContractError("step must be positive")
    return float(f"{raw:.2g}")


@dataclass(frozen=True)
class ResourceBinning:
    """Equally spaced complexity bins on ``[lo, hi]``.

    ``K = round((hi - lo) / step) + 1`` centers are placed from ``lo`` to
    ``hi`` inclusive, so the realised spacing can differ slightly from the
    nominal ``step``.  A resource exactly on an edge belongs to the lower bin.
    """

    lo: float
    hi: float
    step: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ContractError(f"binning needs hi > lo, got [{self.lo}, {self.hi}]")
        if not self.step > 0:
            raise ContractError("binning step must be positive")

    @property
    def k(self) -> int:
        return max(int(round((self.hi - self.lo) / self.step)) + 1, 2)

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.k)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.k - 1)

    def bin_of(self, resource: float) -> int:
        pos = (resource - self.lo) / self.spacing
        idx = math.ceil(round(pos - 0.5, 9))
        return min(max(idx, 0), self.k - 1)

    def bounds(self, k: int) -> tuple[float, float]:
        c = self.centers[k]
        return c - self.spacing / 2, c + self.spacing / 2

    def normalize(self, resource):
        """Map cost-units to [0, 1] over the binning range; works on Values."""
        return (resource - self.lo) * (1.0 / (self.hi - self.lo))

    def contains(self, resource: float, tol: float = 1e-9) -> bool:
        return self.lo - tol <= resource <= self.hi + tol


@dataclass
class SubnetPolicy:
    """One architecture as D (possibly soft) one-hot vectors and their masks."""

    onehots: list[Value]
    masks: list[Value]
    resource: Value
    space: SearchSpace = field(repr=False, default=None)

    @property
    def choices(self) -> tuple[int, ...]:
        return tuple(int(np.argmax(p.data)) for p in self.onehots)

    @property
    def widths(self) -> tuple[int, ...]:
        return self.space.widths(self.choices)

    @property
    def is_hard(self) -> bool:
        return all(_is_onehot(p.data) for p in self.onehots)

    def to_dict(self) -> dict:
        return {
            "choices": list(self.choices),
            "widths": list(self.widths),
            "resource": float(self.resource.item()),
        }


def _is_onehot(x: np.ndarray) -> bool:
    return x.ndim == 1 and np.count_nonzero(x) == 1 and np.sum(x == 1.0) == 1


def map_policy(p, mask_table: np.ndarray, strict: bool = True) -> Value:
    """Mask activated by policy ``p``: ``mask_table @ p``.

    With ``strict`` the policy must be exactly one-hot; soft policies are only
    meaningful inside relaxed training.
    """
    p = as_value(p)
    if strict and not _is_onehot(p.data):
        raise ContractError(f"policy is not one-hot: {p.data}")
    return matmul(mask_table, p)


def subnet_resource(policy: SubnetPolicy, space: SearchSpace) -> Value:
    """Sum of per-unit costs over active units; differentiable in soft policies."""
    if len(policy.masks) != space.depth:
        raise ContractError(f"policy has {len(policy.masks)} masks, space has {space.depth} operations")
    total = None
    for mask, op in zip(policy.masks, space.ops):
        term = vsum(mask * op.unit_costs)
        total = term if total is None else total + term
    return total


def build_policy(space: SearchSpace, onehots: Sequence, strict: bool = True) -> SubnetPolicy:
    if len(onehots) != space.depth:
        raise ContractError(f"expected {space.depth} policies, got {len(onehots)}")
    onehots = [as_value(p) for p in onehots]
    for p, op in zip(onehots, space.ops):
        if p.shape != (op.n,):
            raise ContractError(f"policy shape {p.shape} does not match {op.n} candidates")
    masks = [map_policy(p, op.mask_table, strict) for p, op in zip(onehots, space.ops)]
    policy = SubnetPolicy(onehots, masks, None, space)
    policy.resource = subnet_resource(policy, space)
    return policy


def policy_from_choices(space: SearchSpace, choices: Sequence[int]) -> SubnetPolicy:
    onehots = []
    for op, c in zip(space.ops, choices):
        if not 0 <= c < op.n:
            raise ContractError(f"choice {c} out of range for {op.n} candidates")
        onehots.append(np.eye(op.n)[c])
    return build_policy(space, onehots)


def uniform_choices(space: SearchSpace, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(int(rng.integers(op.n)) for op in space.ops)


def uniform_sample(space: SearchSpace, rng: np.random.Generator) -> SubnetPolicy:
    """Each operation picks a candidate independently and uniformly."""
    return policy_from_choices(space, uniform_choices(space, rng))


def uniform_resources(space: SearchSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    """Resources of ``n`` uniformly sampled subnets (vectorised)."""
    total = np.zeros(n)
    for op in space.ops:
        total += op.candidate_costs[rng.integers(op.n, size=n)]
    return total


@dataclass(frozen=True)
class ResourcePMF:
    values: np.ndarray
    probs: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.values @ self.probs)

    @property
    def var(self) -> float:
        return float(((self.values - self.mean) ** 2) @ self.probs)

    def prob_between(self, lo: float, hi: float, include_lo: bool = False) -> float:
        """Mass on ``(lo, hi]`` (or ``[lo, hi]``)."""
        sel = (self.values <= hi + 1e-9) & ((self.values >= lo - 1e-9) if include_lo else (self.values > lo + 1e-9))
        return float(self.probs[sel].sum())

    def as_dict(self) -> dict[float, float]:
        return dict(zip(self.values.tolist(), self.probs.tolist()))


def irwin_hall_reference(space: SearchSpace, budget: int | None = EXACT_BUDGET) -> ResourcePMF:
    """Exact pmf of subnet resource under uniform sampling.

    Per-operation cost distributions are convolved one at a time, so the work
    is linear in depth.  ``budget`` caps the number of architectures the pmf
    may describe; pass ``None`` to lift it.
    """
    if budget is not None and space.size > budget:
        raise BudgetExceededError(
            f"space has {space.size} architectures (> {budget}); estimate the pmf by "
            "Monte-Carlo with uniform_resources() instead"
        )
    dist = {0.0: 1.0}
    for op in space.ops:
        nxt: dict[float, float] = {}
        w = 1.0 / op.n
        for value, prob in dist.items():
            for cost in op.candidate_costs:
                key = round(value + float(cost), 9)
                nxt[key] = nxt.get(key, 0.0) + prob * w
        dist = nxt
    values = np.array(sorted(dist))
    return ResourcePMF(values, np.array([dist[v] for v in values]))


def bin_pmf(pmf: ResourcePMF, binning: ResourceBinning) -> np.ndarray:
    """Uniform-sampling probability of landing in each bin."""
    out = np.zeros(binning.k)
    for value, prob in zip(pmf.values, pmf.probs):
        if binning.contains(value):
            out[binning.bin_of(value)] += prob
    return out


@dataclass
class RejectionResult:
    policy: SubnetPolicy | None
    tries: int

    @property
    def timed_out(self) -> bool:
        return self.policy is None


def rejection_sample(space: SearchSpace, binning: ResourceBinning, target_bin: int,
                     rng: np.random.Generator, max_tries: int = 10**6) -> RejectionResult:
    """Draw uniform subnets one at a time until one lands in ``target_bin``."""
    if not 0 <= target_bin < binning.k:
        raise ContractError(f"target bin {target_bin} outside [0, {binning.k})")
    lo, hi = binning.bounds(target_bin)
    sizes = np.array([op.n for op in space.ops])
    costs = np.zeros((space.depth, sizes.max()))
    for d, op in enumerate(space.ops):
        costs[d, : op.n] = op.candidate_costs
    rows = np.arange(space.depth)
    for tries in range(1, max_tries + 1):
        choices = rng.integers(0, sizes)
        resource = float(costs[rows, choices].sum())
        if lo - 1e-9 <= resource <= hi + 1e-9 and binning.contains(resource) and binning.bin_of(resource) == target_bin:
            return RejectionResult(policy_from_choices(space, choices.tolist()), tries)
    return RejectionResult(None, max_tries)
