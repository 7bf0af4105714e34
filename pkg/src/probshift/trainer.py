"""Joint training of supernet, architecture generator and bin distribution.

One iteration samples a complexity bin, lets the generator produce a subnet
for that bin, and takes one optimizer step on supernet weights and generator
parameters under ``task_loss + lam * rc_loss``.  Every ``q`` iterations the
current weights become ``w_curr``; after the warmup epochs (and only in
``shift`` mode) the bin distribution is updated from the pair
``(w_prev, w_curr)`` and ``w_prev`` then moves to ``w_curr``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import Adam, backward
from .data import DataSplit
from .errors import ConfigError, ContractError
from .generator import ArchitectureGenerator, joint_loss, rc_loss
from .sampler import PinnedDistribution, SamplingDistribution, UpdateContext, distribution_update, pin_distribution
from .space import ResourceBinning, SearchSpace, SubnetPolicy, uniform_sample
from .supernet import Supernet, WeightSnapshot

log = logging.getLogger(__name__)

MODES = ("shift", "uniform-bins", "uniform-arch")
SCHEDULES = ("constant", "cosine")
METRIC_COLUMNS = ("iteration", "epoch", "kind", "bin", "target", "task_loss", "rc_loss", "resource", "loss_prev")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_w: float = 1e-2
    lr_ag: float = 3e-3
    lr_b: float = 0.025  # see q
    lam: float = 50.0
    # q and lr_b keep the reference cadence (an update every 8% of an epoch)
    # and its total Adam movement (about 5.6 logit units) at 100 steps/epoch
    q: int = 8
    warmup_epochs: int | None = None  # None: 10% of epochs
    seed: int = 0
    baseline_mode: str = "shift"
    tau_g: float = 1.0
    tau_b: float = 1.0
    hidden: int = 64
    binning: dict | None = None  # {"lo", "hi", "step"}; None: derived from the space
    lr_schedule: str = "cosine"  # supernet weights only

    def __post_init__(self):
        if self.warmup_epochs is None:
            self.warmup_epochs = int(round(0.1 * self.epochs))
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.q < 1:
            raise ConfigError(f"q must be >= 1, got {self.q}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.baseline_mode not in MODES:
            raise ConfigError(f"baseline_mode must be one of {MODES}, got {self.baseline_mode!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.binning is not None and set(self.binning) != {"lo", "hi", "step"}:
            raise ConfigError("binning needs exactly the keys lo, hi, step")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def make_binning(self, space: SearchSpace) -> ResourceBinning:
        return ResourceBinning(**self.binning) if self.binning else space.default_binning()


@dataclass
class StepMetrics:
    iteration: int
    epoch: int
    bin: int
    target: float
    task_loss: float
    rc_loss: float
    resource: float
    kind: str = "step"
    loss_prev: float = float("nan")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}


def scheduled_lr(base: float, step: int, total: int, schedule: str) -> float:
    """Learning rate at ``step`` of ``total``; cosine decays to zero."""
    if schedule == "constant" or total <= 0:
        return base
    return 0.5 * base * (1.0 + np.cos(np.pi * min(step, total) / total))


def train_step(supernet: Supernet, gen: ArchitectureGenerator, dist, batch, optimizers, rng: np.random.Generator,
               lam: float, mode: str = "shift", fixed_policy: SubnetPolicy | None = None,
               iteration: int = 0, epoch: int = 0) -> StepMetrics:
    """One joint optimizer step on supernet weights and generator parameters."""
    opt_w, opt_ag = optimizers
    opt_w.zero_grad()
    opt_ag.zero_grad()
    x, y = batch
    sample = dist.sample_bin(rng)
    target = sample.center
    binning = gen.binning
    if fixed_policy is not None:
        policy = fixed_policy
        task = supernet.task_loss(x, y, policy)
        rc = rc_loss(policy, target, binning)
        backward(joint_loss(task, rc, lam))
        reported = policy
    elif mode == "uniform-arch":
        ag_policy = gen.generate(target, rng, hard=True)
        rc = rc_loss(ag_policy, target, binning)
        backward(joint_loss(supernet.task_loss(x, y, ag_policy), rc, lam))
        opt_w.zero_grad()  # weights learn only from the uniformly drawn subnet
        policy = uniform_sample(supernet.space, rng)
        task = supernet.task_loss(x, y, policy)
        backward(task)
        reported = ag_policy
    else:
        policy = gen.generate(target, rng, hard=True)
        task = supernet.task_loss(x, y, policy)
        rc = rc_loss(policy, target, binning)
        backward(joint_loss(task, rc, lam))
        reported = policy
    opt_w.step()
    opt_ag.step()
    return StepMetrics(iteration, epoch, sample.index, target, task.item(), rc.item(), reported.resource.item())


@dataclass
class TrainedArtifacts:
    supernet: Supernet
    gen: ArchitectureGenerator
    dist: SamplingDistribution
    metrics: list[dict]
    probs: list[tuple[int, float, float]]
    config: TrainConfig
    space: SearchSpace
    binning: ResourceBinning
    data: DataSplit | None = field(default=None, repr=False)


class Trainer:
    """Stateful training loop; ``state_dict`` captures everything needed to resume."""

    def __init__(self, config: TrainConfig, space: SearchSpace, data: DataSplit):
        if config.baseline_mode == "shift" and len(data.x_val) == 0:
            raise ContractError("shift mode needs a non-empty validation split")
        self.config = config
        self.space = space
        self.data = data
        self.binning = config.make_binning(space)
        init_seq, data_seq, step_seq, update_seq = np.random.SeedSequence(config.seed).spawn(4)
        init_rng = np.random.default_rng(init_seq)
        self.data_rng = np.random.default_rng(data_seq)
        self.step_rng = np.random.default_rng(step_seq)
        self.update_rng = np.random.default_rng(update_seq)
        self.supernet = Supernet(space, data.n_features, data.n_classes, init_rng)
        self.gen = ArchitectureGenerator(space, self.binning, init_rng, config.hidden, config.tau_g)
        self.dist = SamplingDistribution(self.binning, config.tau_b, config.lr_b)
        self.opt_w = Adam(self.supernet.parameters(), config.lr_w)
        self.opt_ag = Adam(self.gen.parameters(), config.lr_ag)
        self.iteration = 0
        self.epoch = 0
        self.count = 0
        self.w_prev: WeightSnapshot = self.supernet.snapshot()
        self.w_prev_iteration = 0
        self.metrics: list[dict] = []
        self.probs: list[tuple[int, float, float]] = self._prob_rows()

    @property
    def in_warmup(self) -> bool:
        return self.epoch < self.config.warmup_epochs

    @property
    def updates_enabled(self) -> bool:
        return self.config.baseline_mode == "shift" and not self.in_warmup

    def sampler(self) -> SamplingDistribution | PinnedDistribution:
        return self.dist if self.updates_enabled else pin_distribution(self.dist)

    def _prob_rows(self):
        return [(self.dist.t, float(c), float(p)) for c, p in zip(self.binning.centers, self.dist.probabilities)]

    def train_epoch(self) -> None:
        cfg = self.config
        n = len(self.data.x_train)
        order = self.data_rng.permutation(n)
        sampler = self.sampler()
        total = cfg.epochs * int(np.ceil(n / cfg.batch_size))
        before = self.dist.logits.data.copy()
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = (self.data.x_train[idx], self.data.y_train[idx])
            self.opt_w.lr = scheduled_lr(cfg.lr_w, self.iteration, total, cfg.lr_schedule)
            m = train_step(self.supernet, self.gen, sampler, batch, (self.opt_w, self.opt_ag), self.step_rng,
                           cfg.lam, cfg.baseline_mode, iteration=self.iteration, epoch=self.epoch)
            if not np.isfinite(m.task_loss) or not np.isfinite(m.rc_loss):
                raise FloatingPointError(f"non-finite loss at iteration {self.iteration}: {m}")
            self.metrics.append(m.row())
            self.iteration += 1
            self.count += 1
            if self.count == cfg.q:
                self._bracket()
        if not self.updates_enabled and not np.array_equal(before, self.dist.logits.data):
            raise AssertionError("distribution changed while pinned")
        self.epoch += 1

    def _bracket(self) -> None:
        w_curr = self.supernet.snapshot()
        self.count = 0
        if self.updates_enabled:
            if self.iteration - self.w_prev_iteration != self.config.q:
                raise AssertionError("snapshots are not q steps apart")
            self._update(w_curr)
        self.w_prev = w_curr
        self.w_prev_iteration = self.iteration

    def _update(self, w_curr: WeightSnapshot) -> None:
        n_val = len(self.data.x_val)
        idx = self.update_rng.choice(n_val, size=min(self.config.batch_size, n_val), replace=False)
        ctx = UpdateContext.draw(self.w_prev, w_curr, (self.data.x_val[idx], self.data.y_val[idx]),
                                 self.dist, self.gen, self.update_rng)
        res = distribution_update(self.dist, ctx, self.supernet, self.gen)
        self.metrics.append(StepMetrics(self.iteration, self.epoch, res.bin_index, res.center, res.loss_curr,
                                        float("nan"), float("nan"), kind="update", loss_prev=res.loss_prev).row())
        self.probs.extend(self._prob_rows())

    def fit(self, epochs: int | None = None, on_epoch_end=None) -> None:
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            self.train_epoch()
            if on_epoch_end is not None:
                on_epoch_end(self)

    def artifacts(self) -> TrainedArtifacts:
        return TrainedArtifacts(self.supernet, self.gen, self.dist, list(self.metrics), list(self.probs),
                                self.config, self.space, self.binning, self.data)

    # ----------------------------------------------------------- persistence

    def state_dict(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {p.name: p.data.copy() for p in self.supernet.parameters() + self.gen.parameters()}
        arrays.update(self.dist.state_dict())
        arrays.update({f"opt_w.{k}": v for k, v in self.opt_w.state_dict().items()})
        arrays.update({f"opt_ag.{k}": v for k, v in self.opt_ag.state_dict().items()})
        arrays.update({f"w_prev.{k}": v.copy() for k, v in self.w_prev.arrays.items()})
        meta = {
            "iteration": self.iteration,
            "epoch": self.epoch,
            "count": self.count,
            "w_prev_iteration": self.w_prev_iteration,
            "rng": {name: getattr(self, name).bit_generator.state
                    for name in ("data_rng", "step_rng", "update_rng")},
            "metrics": self.metrics,
            "probs": self.probs,
            "config": self.config.to_dict(),
            "space": self.space.to_dict(),
            "n_features": self.data.n_features,
            "n_classes": self.data.n_classes,
        }
        return arrays, meta

    def load_state_dict(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        from .supernet import restore_params

        model_params = self.supernet.parameters() + self.gen.parameters()
        names = {p.name for p in model_params}
        restore_params(model_params, WeightSnapshot({k: v for k, v in arrays.items() if k in names}))
        self.dist.load_state_dict({k: v for k, v in arrays.items() if k.startswith("dist.")})
        self.opt_w.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("opt_w.")})
        self.opt_ag.load_state_dict({k[7:]: v for k, v in arrays.items() if k.startswith("opt_ag.")})
        self.w_prev = WeightSnapshot({k[7:]: v.copy() for k, v in arrays.items() if k.startswith("w_prev.")})
        self.iteration = meta["iteration"]
        self.epoch = meta["epoch"]
        self.count = meta["count"]
        self.w_prev_iteration = meta["w_prev_iteration"]
        for name, state in meta["rng"].items():
            getattr(self, name).bit_generator.state = state
        self.metrics = [dict(r) for r in meta["metrics"]]
        self.probs = [tuple(r) for r in meta["probs"]]


def write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_probs(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("t", "bin_center", "probability"))
        for t, center, prob in rows:
            writer.writerow((t, repr(center), repr(prob)))


def run(config: TrainConfig, space: SearchSpace, data: DataSplit, out_dir: str | Path | None = None,
        checkpoint_every: int = 0, resume_from: str | Path | None = None, stop_after: int | None = None) -> TrainedArtifacts:
    """Train end to end; optionally persist logs and checkpoints under ``out_dir``.

    ``checkpoint_every`` writes ``checkpoints/epoch_XXXX.ckpt`` every that many
    epochs.  ``resume_from`` continues a run from such a checkpoint.
    ``stop_after`` ends early after that many epochs (used to simulate an
    interruption).
    """
    from .persist import load_checkpoint, save_checkpoint

    trainer = Trainer(config, space, data)
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        trainer.load_state_dict(ckpt.arrays, ckpt.meta)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "exports").mkdir(exist_ok=True)
        (out / "config.echo").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    def on_epoch_end(tr: Trainer) -> None:
        log.info("epoch %d done: iteration %d, probs %s", tr.epoch, tr.iteration, np.round(tr.dist.probabilities, 4))
        if out is None:
            return
        write_metrics(out / "metrics.csv", tr.metrics)
        write_probs(out / "probs.csv", tr.probs)
        if checkpoint_every and tr.epoch % checkpoint_every == 0:
            save_checkpoint(out / "checkpoints" / f"epoch_{tr.epoch:04d}.ckpt", *tr.state_dict())

    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    try:
        trainer.fit(last, on_epoch_end)
    finally:
        if out is not None:
            write_metrics(out / "metrics.csv", trainer.metrics)
            write_probs(out / "probs.csv", trainer.probs)
    if out is not None:
        save_checkpoint(out / "checkpoints" / "final.ckpt", *trainer.state_dict())
    return trainer.artifacts()


def finetune(supernet: Supernet, policy: SubnetPolicy, data: DataSplit, epochs: float, lr: float,
             batch_size: int, rng: np.random.Generator, schedule: str = "constant") -> None:
    """Train one fixed subnet in place (callers snapshot/restore around it).

    Fractional ``epochs`` run that fraction of one shuffled epoch.
    """
    opt = Adam(supernet.parameters(), lr)
    n = len(data.x_train)
    steps_per_epoch = int(np.ceil(n / batch_size))
    total = int(round(epochs * steps_per_epoch))
    done = 0
    while done < total:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            if done == total:
                break
            idx = order[start:start + batch_size]
            opt.lr = scheduled_lr(lr, done, total, schedule)
            opt.zero_grad()
            backward(supernet.task_loss(data.x_train[idx], data.y_train[idx], policy))
            opt.step()
            done += 1
    opt.zero_grad()
