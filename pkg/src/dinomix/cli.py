"""Command-line entry point: ``dinomix {gen-data,train,eval,schedule,info}``."""
from __future__ import annotations

import argparse
import hashlib
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import pic
from .config import ConfigError, TrainConfig, config_digest, dump_config, parse_config
from .evalkit import SlidingWindowSpec, evaluate
from .experiment import PHANTOM
from .trainer import load_checkpoint, run_training
from .volcore import ClassStats, PhantomSpec, compute_class_stats, generate_dataset, load_dataset, make_split

__all__ = ["main", "run_cli", "parse_config", "dump_config", "DEFAULT_PHANTOM"]

# gen-data defaults mirror the phantom of the synthetic ablation
DEFAULT_PHANTOM = dict(
    dims=PHANTOM.dims,
    fractions=PHANTOM.fractions,
    contrasts=PHANTOM.contrasts,
    noise=PHANTOM.noise,
)


def _floats(s):
    return tuple(float(x) for x in s.split(","))


def _ints(s):
    return tuple(int(x) for x in s.replace("x", ",").split(","))


def _load_config(path):
    return parse_config(path) if path else TrainConfig()


def _cmd_gen_data(a):
    spec = PhantomSpec(dims=a.dims, fractions=a.fractions, contrasts=a.contrasts, noise=a.noise,
                       background=a.background)
    split = make_split(a.n_train, a.labeled_frac, a.n_val, a.n_test)
    manifest = generate_dataset(a.out, a.seed, spec, split)
    print(manifest)
    return 0


def _cmd_train(a):
    cfg = _load_config(a.config)
    if a.seed is not None:
        cfg = cfg.replace(seed=a.seed)
    dataset = load_dataset(a.data)
    resume = load_checkpoint(a.resume, cfg) if a.resume else None
    result = run_training(cfg, dataset, a.run_dir, resume=resume)
    print(result.checkpoint)
    return 0


def _cmd_eval(a):
    state = load_checkpoint(a.checkpoint)
    dataset = load_dataset(a.data, num_classes=state.num_classes)
    cfg = state.config
    spec = SlidingWindowSpec(a.window or cfg.crop_dims, a.stride or cfg.eval_stride)
    out = a.out or Path(a.checkpoint).with_name(f"metrics_{a.split}.csv")
    report = evaluate(state.student, dataset.section(a.split), spec, state.num_classes, out)
    print(f"mean dice {report.mean_dice} mean asd {report.mean_asd} missing {report.missing} -> {out}")
    return 0


def _cmd_schedule(a):
    cfg = _load_config(a.config)
    if a.counts:
        counts = np.asarray(_ints(a.counts), dtype=np.int64)
        stats = ClassStats(counts, int(counts.sum()))
    elif a.data:
        ds = load_dataset(a.data)
        stats = compute_class_stats([c.labels for c in ds.section("labeled")], ds.num_classes)
    else:
        raise ValueError("schedule needs --counts or --data")
    schedule = pic.PICSchedule(cfg.pic_gamma, cfg.pic_eta, a.e_max or cfg.e_max)
    ratios = pic.imbalance_ratios(stats)
    p_bal = pic.balanced_distribution(ratios, schedule.gamma)
    n = pic.write_schedule_csv(a.out, p_bal, schedule, ratios)
    print(f"{n} rows -> {a.out}")
    return 0


def _cmd_info(a):
    import torch

    cfg = _load_config(a.config)
    sys.stdout.write(dump_config(cfg))
    env = f"python={platform.python_version()} numpy={np.__version__} torch={torch.__version__}"
    print(f"# config_digest = {config_digest(cfg)}")
    print(f"# environment = {env}")
    print(f"# environment_digest = {hashlib.sha256(env.encode()).hexdigest()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dinomix", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="{gen-data,train,eval,schedule,info}")

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dims", type=_ints, default=DEFAULT_PHANTOM["dims"])
    g.add_argument("--fractions", type=_floats, default=DEFAULT_PHANTOM["fractions"])
    g.add_argument("--contrasts", type=_floats, default=DEFAULT_PHANTOM["contrasts"])
    g.add_argument("--noise", type=float, default=DEFAULT_PHANTOM["noise"])
    g.add_argument("--background", type=float, default=PHANTOM.background)
    g.add_argument("--n-train", type=int, default=16)
    g.add_argument("--labeled-frac", type=float, default=0.2)
    g.add_argument("--n-val", type=int, default=2)
    g.add_argument("--n-test", type=int, default=4)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="run training")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset manifest")
    t.add_argument("--run-dir", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("labeled", "unlabeled", "val", "test"))
    e.add_argument("--out")
    e.add_argument("--window", type=_ints)
    e.add_argument("--stride", type=_ints)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("schedule", help="write the per-epoch class sampling schedule as CSV")
    s.add_argument("--config")
    s.add_argument("--counts", help="comma-separated per-class voxel counts")
    s.add_argument("--data", help="manifest whose labeled split supplies the counts")
    s.add_argument("--e-max", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_schedule)

    i = sub.add_parser("info", help="print the resolved config and environment digest")
    i.add_argument("--config")
    i.set_defaults(func=_cmd_info)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"dinomix {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
