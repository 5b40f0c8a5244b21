"""Command-line entry point: generate, train, eval, sweep."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config, save_config
from .crossvolume import VcvrlConfig
from .metrics import write_jsonl

log = logging.getLogger("vcvrl")


def _csv(kind):
    return lambda s: [kind(v) for v in s.split(",") if v.strip()]


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config")
    g = p.add_argument_group("overrides (take precedence over the config file)")
    g.add_argument("--seed", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--iters-per-epoch", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--data", dest="data_dir")
    g.add_argument("--levels", type=int)
    g.add_argument("--channels", type=_csv(int))
    g.add_argument("--dims", type=_csv(int), help="generated volume extents D,H,W")
    g.add_argument("--crop", type=_csv(int), help="patch extents D,H,W")
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--anchors", type=int)
    g.add_argument("--strategy", choices=["random", "PH", "hybrid"])
    g.add_argument("--pair-mode", choices=["pool_sample", "descriptor_relaxed", "descriptor_strict"])
    g.add_argument("--momentum", dest="momentum", action="store_true", default=None)
    g.add_argument("--no-momentum", dest="momentum", action="store_false")
    g.add_argument("--vcvrl", dest="vcvrl_enabled", action="store_true", default=None)
    g.add_argument("--no-vcvrl", dest="vcvrl_enabled", action="store_false")


def build_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.seed is not None:
        cfg = RunConfig(seed=args.seed)
    else:
        raise SystemExit("either --config or --seed is required")
    top = {k: getattr(args, k) for k in ("seed", "epochs", "iters_per_epoch", "batch_size", "lr", "weight_decay", "data_dir")}
    cfg = cfg.replace(**{k: v for k, v in top.items() if v is not None})
    if args.levels is not None or args.channels is not None:
        seg = cfg.segnet
        channels = args.channels if args.channels is not None else seg.channels
        cfg = cfg.replace(segnet=replace(seg, levels=args.levels or len(channels), channels=channels))
    if args.dims is not None or args.noise_sigma is not None:
        gen = cfg.generator
        cfg = cfg.replace(
            generator=replace(
                gen,
                dims=tuple(args.dims) if args.dims else gen.dims,
                noise_sigma=gen.noise_sigma if args.noise_sigma is None else args.noise_sigma,
            )
        )
    if args.crop is not None:
        cfg = cfg.replace(augmentation=replace(cfg.augmentation, crop=tuple(args.crop)))
    if args.vcvrl_enabled is False:
        cfg = cfg.replace(vcvrl=None)
    else:
        v = cfg.vcvrl or (VcvrlConfig(anchors=64) if args.vcvrl_enabled else None)
        if v is not None:
            changes = {k: getattr(args, k) for k in ("anchors", "strategy", "pair_mode", "momentum")}
            v = replace(v, **{k: x for k, x in changes.items() if x is not None})
        cfg = cfg.replace(vcvrl=v)
    return cfg


def cmd_generate(args) -> int:
    from .synthdata import make_dataset, write_dataset

    cfg = build_config(args)
    gen = replace(cfg.generator, seed=cfg.seed)
    data = make_dataset(gen, cfg.split_counts)
    manifest = write_dataset(args.out, data)
    log.info("wrote %s", ", ".join(f"{len(v)} {k}" for k, v in data.items()))
    print(manifest)
    return 0


def cmd_train(args) -> int:
    from .train import run_train

    cfg = build_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(args.out / "config.json", cfg)
    result = run_train(cfg, out_dir=args.out, resume=args.resume)
    print(json.dumps({"best_val_f1": result.best_f1, "best_epoch": result.state.best_epoch, "checkpoint": str(args.out / "best.vckp")}))
    return 0


def cmd_eval(args) -> int:
    from .evaluate import run_eval
    from .synthdata import read_dataset

    expected = None
    if args.config is not None:
        expected = load_config(args.config).segnet
    data = read_dataset(args.data)
    samples = data.get(args.split) or []
    if not samples:
        raise FileNotFoundError(f"no volumes in split {args.split!r} under {args.data}")
    records, agg = run_eval(args.checkpoint, samples, expected)
    write_jsonl(args.out, [*records, agg])
    print(json.dumps(agg))
    return 0


def cmd_sweep(args) -> int:
    from .train import run_sweep

    cfg = build_config(args)
    out = args.out or Path(f"sweep_{args.axis}.csv")
    rows = run_sweep(cfg, args.axis, args.values, seeds=args.seeds, out_csv=out)
    for r in rows:
        print(f"{r['axis']}={r['value']}: f1 {r['f1_mean']:.4f} +- {r['f1_std']:.4f}")
    print(out)
    return 0


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = argparse.ArgumentParser(prog="vcvrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic train/val/test dataset")
    _add_overrides(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a model and keep the best validation checkpoint")
    _add_overrides(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="last.vckp of an interrupted run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on stored volumes")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--config", type=Path, help="reject the checkpoint if its network differs from this config")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="ablation / anchor-count sweep")
    _add_overrides(p)
    p.add_argument("--axis", required=True, choices=["anchors", "strategy", "pair_mode", "momentum"])
    p.add_argument("--values", type=_csv(str), required=True, help="comma-separated; 'off' trains the baseline")
    p.add_argument("--seeds", type=_csv(int))
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
