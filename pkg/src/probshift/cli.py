"""Command-line entry point: ``probshift <command> --config run.yaml --out DIR``.

Exit status is 0 on success, 1 when the config or inputs are invalid and 2 for
usage errors.  Every command writes ``manifest.json`` (command line, config
echo, seed, library versions) into its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CheckpointError, ConfigError, ContractError, ParseError
from .persist import RunConfig, config_from_dict, load_checkpoint, load_config, load_data, space_from_dict

log = logging.getLogger("probshift")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probshift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (defaults are used when omitted)")
    common.add_argument("--out", type=Path, help="output directory (default: config 'output' or runs/<command>)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    trained = argparse.ArgumentParser(add_help=False)
    trained.add_argument("--checkpoint", type=Path, help="trained checkpoint (default: <out>/checkpoints/final.ckpt)")

    p = sub.add_parser("train", parents=[common], help="train supernet, generator and distribution")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N", help="checkpoint every N epochs")
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.add_argument("--stop-after", type=int, metavar="EPOCHS", help="stop after this many epochs")

    p = sub.add_parser("sample", parents=[common, trained], help="export the architecture for one budget")
    p.add_argument("--flops", type=float, required=True, help="target resource C")
    p = sub.add_parser("eval", parents=[common, trained], help="inherited accuracy for one budget")
    p.add_argument("--flops", type=float, required=True, help="target resource C")
    sub.add_parser("pareto", parents=[common, trained], help="write pareto.csv (one subnet per bin)")

    p = sub.add_parser("bench-sampler", parents=[common, trained], help="generator vs rejection sampling time")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--max-tries", type=int, default=10**6)
    p.add_argument("--bins", type=_ints, help="comma-separated bin indices (default: all)")

    p = sub.add_parser("kendall", parents=[common], help="rank correlation of sufficiency scores")
    p.add_argument("--stages", type=_ints, help="comma-separated epochs (default: 2,4)")
    p.add_argument("--subnets", type=int, help="number of sampled subnets (default 30)")

    p = sub.add_parser("ranking", parents=[common, trained], help="inherited vs finetuned ranking of random subnets")
    p.add_argument("--subnets", type=int, default=30, help="number of sampled subnets (default 30)")

    p = sub.add_parser("dist-check", parents=[common], help="uniform-sampling resource statistics")
    p.add_argument("--depth", type=int, default=12, help="depth of the checked space (default 12)")
    p.add_argument("--samples", type=int, default=10**6)
    p.add_argument("--trend", type=_ints, default=[4, 8, 16], help="depths for the KS trend (default 4,8,16)")

    p = sub.add_parser("ablate", parents=[common], help="Pareto sweeps over bin steps and update intervals")
    p.add_argument("--steps", type=_floats, help="comma-separated bin steps")
    p.add_argument("--qs", type=_ints, help="comma-separated update intervals")
    return parser


def _manifest(out: Path, args, cfg: RunConfig, extra: dict | None = None) -> None:
    import scipy
    import sklearn

    manifest = {
        "command": args.command,
        "argv": args.argv,
        "seed": cfg.seed,
        "config": cfg.raw,
        "train": cfg.train.to_dict(),
        "versions": {"probshift": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "scikit-learn": sklearn.__version__},
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _load_trained(cfg: RunConfig, path: Path):
    from .trainer import TrainConfig, Trainer

    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path} (run 'train' first or pass --checkpoint)")
    ckpt = load_checkpoint(path)
    config = TrainConfig.from_dict(ckpt.meta["config"])
    space = space_from_dict(ckpt.meta["space"])
    data = load_data(cfg)
    if (data.n_features, data.n_classes) != (ckpt.meta["n_features"], ckpt.meta["n_classes"]):
        raise ConfigError("checkpoint was trained on data with a different shape")
    trainer = Trainer(config, space, data)
    trainer.load_state_dict(ckpt.arrays, ckpt.meta)
    return trainer


def _cmd_train(args, cfg, out):
    from .trainer import run

    art = run(cfg.train, cfg.space, load_data(cfg), out, args.checkpoint_every, args.resume, args.stop_after)
    (out / "config.echo").write_text(cfg.echo())
    print(f"trained {art.config.epochs} epochs; final probabilities {np.round(art.dist.probabilities, 4).tolist()}")
    return {}


def _cmd_sample(args, cfg, out):
    from .generator import extract_argmax

    trainer = _load_trained(cfg, args.checkpoint or out / "checkpoints" / "final.ckpt")
    policy = extract_argmax(trainer.gen, args.flops)
    arch = {"target": args.flops, **policy.to_dict()}
    path = out / "exports" / f"arch_{args.flops:g}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(arch, indent=2, sort_keys=True))
    print(json.dumps({"target": args.flops, "widths": list(policy.widths), "resource": arch["resource"]}))
    return {"export": str(path)}


def _cmd_eval(args, cfg, out):
    from .generator import extract_argmax

    trainer = _load_trained(cfg, args.checkpoint or out / "checkpoints" / "final.ckpt")
    policy = extract_argmax(trainer.gen, args.flops)
    acc, loss = trainer.supernet.evaluate(trainer.data.x_val, trainer.data.y_val, policy)
    result = {"target": args.flops, "widths": list(policy.widths), "resource": policy.resource.item(),
              "accuracy": acc, "loss": loss}
    (out / f"eval_{args.flops:g}.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(json.dumps(result))
    return {}


def _cmd_pareto(args, cfg, out):
    from .analysis import sweep_artifacts, write_pareto

    trainer = _load_trained(cfg, args.checkpoint or out / "checkpoints" / "final.ckpt")
    records = sweep_artifacts(trainer.artifacts(), trainer.config.baseline_mode)
    write_pareto(out / "pareto.csv", records)
    for r in records:
        print(f"C={r.target:g} resource={r.resource:g} acc={r.accuracy:.4f}")
    return {}


def _cmd_bench(args, cfg, out):
    from .analysis import sampler_bench, write_bench
    from .generator import ArchitectureGenerator

    ckpt = args.checkpoint or out / "checkpoints" / "final.ckpt"
    if args.checkpoint or ckpt.is_file():
        trainer = _load_trained(cfg, ckpt)
        space, gen, binning = trainer.space, trainer.gen, trainer.binning
    else:
        # timing does not depend on training, so an untrained generator will do
        space, binning = cfg.space, cfg.train.make_binning(cfg.space)
        gen = ArchitectureGenerator(space, binning, np.random.default_rng(cfg.seed), cfg.train.hidden)
    records = sampler_bench(space, gen, binning, args.trials, args.max_tries, cfg.seed, args.bins)
    write_bench(out / "bench.csv", records)
    for r in records:
        print(f"bin {r.bin} pmf={r.uniform_pmf:.3g} ag={r.ag_median_s * 1e3:.3f}ms "
              f"rejection={r.rejection_median_s * 1e3:.3f}ms tries={r.mean_tries:.1f} timeouts={r.timeouts}")
    return {}


def _cmd_kendall(args, cfg, out):
    from .analysis import kendall_protocol, write_kendall

    stages = args.stages or cfg.analysis.get("kendall_stages", [2, 4])
    n = args.subnets or cfg.analysis.get("n_subnets", 30)
    result = kendall_protocol(cfg.train, cfg.space, load_data(cfg), stages, n, seed=cfg.seed)
    write_kendall(out / "kendall.csv", result)
    for st in result:
        print(f"epoch {st.epoch}: tau={st.tau:.3f}")
    return {"tau": {st.epoch: st.tau for st in result}}


def _cmd_ranking(args, cfg, out):
    from .analysis import ranking_correlation, write_ranking

    trainer = _load_trained(cfg, args.checkpoint or out / "checkpoints" / "final.ckpt")
    result = ranking_correlation(trainer.artifacts(), args.subnets, seed=cfg.seed)
    write_ranking(out / "ranking.csv", result)
    print(f"tau={result.tau:.3f} over {len(result.pairs)} subnets; "
          f"tau={result.tau_good:.3f} over the {result.n_good} at or above median inherited accuracy")
    return {"tau": result.tau, "tau_good": result.tau_good}


def _cmd_dist_check(args, cfg, out):
    from .analysis import ks_normal_distance, remark_check
    from .space import SearchSpace, irwin_hall_reference

    def at_depth(depth: int) -> SearchSpace:
        ops = [cfg.space.ops[d % cfg.space.depth] for d in range(depth)]
        return SearchSpace(tuple(ops), cfg.space.resource_name)

    rng = np.random.default_rng(cfg.seed)
    result = remark_check(at_depth(args.depth), args.samples, rng)
    # the trend reaches past the enumeration budget on purpose
    result["ks_trend"] = {d: ks_normal_distance(irwin_hall_reference(at_depth(d), None)) for d in args.trend}
    (out / "dist_check.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(f"D={args.depth} samples={args.samples} TV={result['tv']:.5f} KS_normal={result['ks_normal']:.5f}")
    print("KS trend: " + ", ".join(f"D={d}: {v:.5f}" for d, v in result["ks_trend"].items()))
    return {}


def _cmd_ablate(args, cfg, out):
    from .analysis import ablate, write_pareto

    steps = args.steps if args.steps is not None else cfg.analysis.get("steps", [])
    qs = args.qs if args.qs is not None else cfg.analysis.get("qs", [])
    if not steps and not qs:
        raise ConfigError("ablate needs --steps and/or --qs (or analysis.steps / analysis.qs in the config)")
    result = ablate(cfg.train, cfg.space, load_data(cfg), steps, qs)
    write_pareto(out / "ablate.csv", [r for records in result.values() for r in records])
    for tag, records in result.items():
        print(f"{tag}: K={len(records)} mean acc={np.mean([r.accuracy for r in records]):.4f}")
    return {}


COMMANDS = {
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "pareto": _cmd_pareto,
    "bench-sampler": _cmd_bench,
    "kendall": _cmd_kendall,
    "ranking": _cmd_ranking,
    "dist-check": _cmd_dist_check,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config is not None else config_from_dict({})
        out = args.out or Path(cfg.output or f"runs/{args.command}")
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, cfg, out) or {}
        _manifest(out, args, cfg, extra)
    except (ConfigError, ContractError, CheckpointError, ParseError, ValueError) as exc:
        print(f"probshift {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
