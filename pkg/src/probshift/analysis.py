"""Diagnostics: resource-distribution statistics, Pareto sweeps, rank
correlation of training-sufficiency scores, sampler timing and ablations.

Every study returns plain records and has a matching CSV writer; plotting
is left to external tools.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .data import DataSplit
from .errors import ContractError
from .generator import ArchitectureGenerator, extract_argmax
from .space import (ResourceBinning, ResourcePMF, SearchSpace, SubnetPolicy, bin_pmf, irwin_hall_reference,
                    rejection_sample, uniform_choices, policy_from_choices)
from .supernet import Supernet, WeightSnapshot
from .trainer import TrainConfig, TrainedArtifacts, Trainer, finetune

# ------------------------------------------------------ distribution statistics


def total_variation(pmf: ResourcePMF, samples: np.ndarray) -> float:
    """TV distance between the empirical distribution of ``samples`` and ``pmf``."""
    values, counts = np.unique(np.round(np.asarray(samples, dtype=float), 9), return_counts=True)
    emp = dict(zip(values.tolist(), (counts / counts.sum()).tolist()))
    ref = pmf.as_dict()
    keys = set(emp) | set(ref)
    return 0.5 * sum(abs(emp.get(k, 0.0) - ref.get(k, 0.0)) for k in keys)


def lattice_step(values: np.ndarray) -> float:
    diffs = np.diff(np.sort(values))
    return float(diffs.min()) if len(diffs) else 0.0


def ks_normal_distance(pmf: ResourcePMF) -> float:
    """Kolmogorov-Smirnov distance between ``pmf`` and the moment-matched normal.

    The support is a lattice, so the normal CDF is read half a lattice step
    above each support point (continuity correction); without it the
    distance would be dominated by the jump size of the discrete CDF.
    """
    mu, sd = pmf.mean, np.sqrt(pmf.var)
    if sd == 0:
        return 1.0
    half = lattice_step(pmf.values) / 2
    cdf = np.cumsum(pmf.probs)
    normal = stats.norm.cdf((pmf.values + half - mu) / sd)
    return float(np.max(np.abs(cdf - normal)))


def remark_check(space: SearchSpace, n_samples: int, rng: np.random.Generator,
                 budget: int | None = 10**7) -> dict:
    """Exact pmf vs Monte-Carlo uniform sampling, and vs the matched normal."""
    from .space import uniform_resources

    pmf = irwin_hall_reference(space, budget)
    samples = uniform_resources(space, n_samples, rng)
    return {
        "depth": space.depth,
        "n_samples": n_samples,
        "tv": total_variation(pmf, samples),
        "ks_normal": ks_normal_distance(pmf),
        "mean_exact": pmf.mean,
        "mean_empirical": float(samples.mean()),
    }


def chi_square_uniform(counts: Sequence[int]) -> float:
    """p-value of the chi-square goodness-of-fit test against equal frequencies."""
    return float(stats.chisquare(np.asarray(counts, dtype=float)).pvalue)


# ------------------------------------------------------------------- Pareto


@dataclass
class ParetoRecord:
    target: float
    resource: float
    accuracy: float
    loss: float
    tag: str = ""
    widths: str = ""


def pareto_sweep(supernet: Supernet, gen: ArchitectureGenerator, x_val, y_val, tag: str = "") -> list[ParetoRecord]:
    """Extract one subnet per bin center and score it with inherited weights."""
    out = []
    for target in gen.binning.centers:
        policy = extract_argmax(gen, float(target))
        acc, loss = supernet.evaluate(x_val, y_val, policy)
        out.append(ParetoRecord(float(target), policy.resource.item(), acc, loss, tag,
                                "-".join(map(str, policy.widths))))
    return out


def sweep_artifacts(art: TrainedArtifacts, tag: str = "") -> list[ParetoRecord]:
    return pareto_sweep(art.supernet, art.gen, art.data.x_val, art.data.y_val, tag)


def write_pareto(path: str | Path, records: Iterable[ParetoRecord]) -> None:
    _write_dataclasses(path, list(records), ParetoRecord)


# -------------------------------------------------------------- Kendall tau


@dataclass
class RankPair:
    subnet: str
    inherited: float
    oracle: float


def kendall_tau(a, b=None) -> float:
    """Kendall's tau-a; tied pairs count as neither concordant nor discordant.

    Accepts either two score sequences or one sequence of :class:`RankPair`.
    """
    if b is None:
        pairs = list(a)
        a = [p.inherited for p in pairs]
        b = [p.oracle for p in pairs]
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("kendall_tau needs two equal-length 1-D score lists")
    n = len(x)
    if n < 2:
        raise ContractError("kendall_tau needs at least 2 pairs")
    if np.isnan(x).any() or np.isnan(y).any():
        raise ContractError("kendall_tau scores contain NaN")
    iu = np.triu_indices(n, k=1)
    s = np.sign(x[:, None] - x[None, :])[iu] * np.sign(y[:, None] - y[None, :])[iu]
    return float(s.sum() / (n * (n - 1) / 2))


def subnet_losses(supernet: Supernet, policies: Sequence[SubnetPolicy], x, y, snap: WeightSnapshot | None = None) -> np.ndarray:
    if snap is not None:
        supernet.restore(snap)
    return np.array([supernet.evaluate(x, y, p)[1] for p in policies])


def sufficiency_scores(supernet: Supernet, policies: Sequence[SubnetPolicy], x_val, y_val,
                       w_prev: WeightSnapshot, w_curr: WeightSnapshot) -> np.ndarray:
    """Validation-loss improvement of each subnet from ``w_prev`` to ``w_curr``.

    This is the per-subnet quantity whose bin-gradient drives distribution
    updates.  The supernet is left at ``w_curr``.
    """
    before = subnet_losses(supernet, policies, x_val, y_val, w_prev)
    after = subnet_losses(supernet, policies, x_val, y_val, w_curr)
    return before - after


@dataclass
class KendallStage:
    epoch: int
    tau: float
    scores: np.ndarray
    drops: np.ndarray
    subnets: list[str]


def finetune_drops(supernet: Supernet, policies: Sequence[SubnetPolicy], data: DataSplit, w: WeightSnapshot,
                   epochs: float, lr: float, batch_size: int, seed: int) -> np.ndarray:
    """Val-loss drop of each subnet after finetuning it alone from ``w``.

    Every subnet sees the same batch order, so differences between drops
    come from the subnets rather than from shuffling.
    """
    drops = []
    for policy in policies:
        supernet.restore(w)
        before = supernet.evaluate(data.x_val, data.y_val, policy)[1]
        finetune(supernet, policy, data, epochs, lr, batch_size, np.random.default_rng(seed))
        drops.append(before - supernet.evaluate(data.x_val, data.y_val, policy)[1])
    supernet.restore(w)
    return np.array(drops)


def kendall_protocol(config: TrainConfig, space: SearchSpace, data: DataSplit, stages: Sequence[int],
                     n_subnets: int = 30, finetune_epochs: float = 1.0, seed: int = 0,
                     finetune_lr: float | None = None) -> list[KendallStage]:
    """Rank agreement between improvement scores and finetuning gains.

    A supernet is trained with uniform architecture sampling.  At each epoch
    in ``stages`` the same ``n_subnets`` random subnets are scored by their
    validation-loss improvement over the last epoch, then finetuned one at a
    time for ``finetune_epochs`` at ``finetune_lr`` (default a tenth of the
    supernet rate) and their validation-loss drop recorded.
    """
    stages = sorted(stages)
    if not stages or stages[0] < 1:
        raise ContractError("stages must be epochs >= 1")
    if stages[-1] > config.epochs:
        raise ContractError(f"stage {stages[-1]} is past the {config.epochs}-epoch horizon")
    cfg = replace(config, baseline_mode="uniform-arch")
    trainer = Trainer(cfg, space, data)
    rng = np.random.default_rng(seed)
    choices = [uniform_choices(space, rng) for _ in range(n_subnets)]
    policies = [policy_from_choices(space, c) for c in choices]
    names = ["-".join(map(str, space.widths(c))) for c in choices]
    out = []
    for epoch in stages:
        trainer.fit(epoch - 1)
        w_prev = trainer.supernet.snapshot()
        trainer.fit(epoch)
        w_curr = trainer.supernet.snapshot()
        scores = sufficiency_scores(trainer.supernet, policies, data.x_val, data.y_val, w_prev, w_curr)
        lr = cfg.lr_w / 10 if finetune_lr is None else finetune_lr
        drops = finetune_drops(trainer.supernet, policies, data, w_curr, finetune_epochs, lr, cfg.batch_size,
                               seed + epoch)
        out.append(KendallStage(epoch, kendall_tau(scores, drops), scores, drops, names))
    return out


def write_kendall(path: str | Path, stages: Iterable[KendallStage]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "tau", "subnet", "score", "finetune_drop"))
        for st in stages:
            for name, s, d in zip(st.subnets, st.scores, st.drops):
                w.writerow((st.epoch, repr(st.tau), name, repr(float(s)), repr(float(d))))


@dataclass
class RankingResult:
    pairs: list[RankPair]
    tau: float
    tau_good: float  # over subnets with inherited accuracy >= the median
    n_good: int


def ranking_correlation(art: TrainedArtifacts, n_subnets: int = 30, finetune_fraction: float = 0.1, seed: int = 0,
                        finetune_lr: float | None = None) -> RankingResult:
    """Do inherited accuracies order random subnets like finetuned ones do?

    Each subnet is finetuned from the inherited weights with the same budget
    and learning rate as :func:`inherit_vs_finetune`; the supernet is
    restored afterwards.
    """
    data, cfg, net = art.data, art.config, art.supernet
    lr = cfg.lr_w / 10 if finetune_lr is None else finetune_lr
    rng = np.random.default_rng(seed)
    base = net.snapshot()
    pairs = []
    for i in range(n_subnets):
        choices = uniform_choices(art.space, rng)
        policy = policy_from_choices(art.space, choices)
        inherited = net.evaluate(data.x_val, data.y_val, policy)[0]
        finetune(net, policy, data, finetune_fraction * cfg.epochs, lr, cfg.batch_size,
                 np.random.default_rng([seed, i]), cfg.lr_schedule)
        pairs.append(RankPair("-".join(map(str, art.space.widths(choices))), inherited,
                              net.evaluate(data.x_val, data.y_val, policy)[0]))
        net.restore(base)
    cut = float(np.median([p.inherited for p in pairs]))
    good = [p for p in pairs if p.inherited >= cut]
    tau_good = kendall_tau(good) if len(good) >= 2 else float("nan")
    return RankingResult(pairs, kendall_tau(pairs), tau_good, len(good))


def write_ranking(path: str | Path, result: RankingResult) -> None:
    _write_dataclasses(path, result.pairs, RankPair)


# --------------------------------------------------------- inherit/finetune


@dataclass
class InheritRecord:
    target: float
    resource: float
    inherited: float
    finetuned: float
    retrained: float = float("nan")


def inherit_vs_finetune(art: TrainedArtifacts, finetune_fraction: float = 0.1, retrain: bool = False,
                        seed: int = 0, finetune_lr: float | None = None) -> list[InheritRecord]:
    """Inherited accuracy of each extracted subnet vs. finetuned (and retrained).

    Finetuning continues from the inherited weights for ``finetune_fraction``
    of the training epochs at ``finetune_lr`` (default a tenth of the supernet rate),
    following the run's schedule; retraining starts from a fresh
    initialisation and uses the full epoch budget.
    """
    data, cfg, net = art.data, art.config, art.supernet
    lr = cfg.lr_w / 10 if finetune_lr is None else finetune_lr
    base = net.snapshot()
    out = []
    for k, target in enumerate(art.binning.centers):
        policy = extract_argmax(art.gen, float(target))
        inherited = net.evaluate(data.x_val, data.y_val, policy)[0]
        finetune(net, policy, data, finetune_fraction * cfg.epochs, lr, cfg.batch_size,
                 np.random.default_rng([seed, k]), cfg.lr_schedule)
        finetuned = net.evaluate(data.x_val, data.y_val, policy)[0]
        net.restore(base)
        retrained = float("nan")
        if retrain:
            fresh = Supernet(art.space, data.n_features, data.n_classes, np.random.default_rng([seed, k, 1]))
            finetune(fresh, policy, data, cfg.epochs, cfg.lr_w, cfg.batch_size, np.random.default_rng([seed, k, 2]),
                     cfg.lr_schedule)
            retrained = fresh.evaluate(data.x_val, data.y_val, policy)[0]
        out.append(InheritRecord(float(target), policy.resource.item(), inherited, finetuned, retrained))
    return out


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchRecord:
    bin: int
    center: float
    uniform_pmf: float
    ag_median_s: float
    rejection_median_s: float
    mean_tries: float
    timeouts: int
    trials: int


def sampler_bench(space: SearchSpace, gen: ArchitectureGenerator, binning: ResourceBinning, trials: int = 20,
                  max_tries: int = 10**6, seed: int = 0, bins: Sequence[int] | None = None,
                  budget: int | None = 10**7) -> list[BenchRecord]:
    """Median wall time to obtain one subnet per bin: generator vs rejection."""
    try:
        pmf_bins = bin_pmf(irwin_hall_reference(space, budget), binning)
    except ContractError:
        pmf_bins = np.full(binning.k, np.nan)
    rng = np.random.default_rng(seed)
    out = []
    for k in (range(binning.k) if bins is None else bins):
        center = float(binning.centers[k])
        ag_times, rj_times, tries, timeouts = [], [], [], 0
        for _ in range(trials):
            t0 = time.perf_counter()
            extract_argmax(gen, center)
            ag_times.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            res = rejection_sample(space, binning, k, rng, max_tries)
            rj_times.append(time.perf_counter() - t0)
            tries.append(res.tries)
            timeouts += res.timed_out
        out.append(BenchRecord(k, center, float(pmf_bins[k]), float(np.median(ag_times)),
                               float(np.median(rj_times)), float(np.mean(tries)), timeouts, trials))
    return out


def write_bench(path: str | Path, records: Iterable[BenchRecord]) -> None:
    _write_dataclasses(path, list(records), BenchRecord)


# ----------------------------------------------------------------- ablation


def ablate(config: TrainConfig, space: SearchSpace, data: DataSplit, steps: Sequence[float] = (),
           qs: Sequence[int] = ()) -> dict[str, list[ParetoRecord]]:
    """One full run per grid point (shared seed), each swept over its own bins."""
    from .trainer import run

    base_binning = config.make_binning(space)
    grid = [(f"step={s:g}", replace(config, binning={"lo": base_binning.lo, "hi": base_binning.hi, "step": float(s)}))
            for s in steps]
    grid += [(f"q={q}", replace(config, q=int(q))) for q in qs]
    out = {}
    for tag, cfg in grid:
        art = run(cfg, space, data)
        out[tag] = sweep_artifacts(art, tag)
    return out


def _write_dataclasses(path, records, cls) -> None:
    names = [f for f in cls.__dataclass_fields__]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for r in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})
