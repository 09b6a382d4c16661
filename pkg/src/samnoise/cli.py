"""Command line entry point: ``samnoise {gen-data,train,sweep,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from samnoise import oracle
from samnoise import synthdata as SD
from samnoise.runner import DataSpec, ExperimentConfig, load_data, run, sweep

log = logging.getLogger("samnoise")


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _gamma_pairs(text):
    pairs = []
    for item in text.split(","):
        gz, _, gv = item.partition(":")
        pairs.append((float(gz), float(gv or 0.0)))
    return pairs


def _common(p):
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--rule", help="sgd | nsam | sam1 | lsam | jsam | regsgd")
    p.add_argument("--rho", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int, help="0 for full batch")
    p.add_argument("--gamma-z", type=float)
    p.add_argument("--gamma-v", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int, action="append", dest="seeds", help="repeatable")
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], dest="seed_list")
    p.add_argument("--family", help="linear | dln2 | mlp")
    p.add_argument("--width", type=int)
    p.add_argument("--init-std")
    p.add_argument("--data", help="toy | digits | idx | cifar | snld")
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--out", type=Path)
    p.add_argument("--probe-size", type=int)


def build_config(args) -> ExperimentConfig:
    """Defaults < config file < command line flags."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    opt = {}
    for flag, key in (
        ("rule", "rule"),
        ("rho", "rho"),
        ("lr", "lr"),
        ("weight_decay", "weight_decay"),
        ("gamma_z", "gamma_z"),
        ("gamma_v", "gamma_v"),
    ):
        if getattr(args, flag) is not None:
            opt[key] = getattr(args, flag)
    if args.batch_size is not None:
        opt["batch_size"] = args.batch_size or None
    if opt:
        cfg.optim = replace(cfg.optim, **opt)
    if args.family is not None:
        cfg.model.family = args.family
    if args.width is not None:
        cfg.model.width = args.width
    if args.init_std is not None:
        cfg.model.init_std = args.init_std if args.init_std == "lecun" else float(args.init_std)
    if args.data is not None:
        cfg.data.kind = args.data
    if args.noise_rate is not None:
        cfg.data.noise_rate = args.noise_rate
    seeds = (args.seeds or []) + (args.seed_list or [])
    if seeds:
        cfg.seeds = seeds
    for flag in ("epochs", "eval_every", "probe_size"):
        if getattr(args, flag) is not None:
            setattr(cfg, flag, getattr(args, flag))
    if args.out is not None:
        cfg.out = str(args.out)
    cfg.__post_init__()
    return cfg


def cmd_gen_data(args) -> int:
    spec = DataSpec(kind=args.data or "toy")
    if args.noise_rate is not None:
        spec.noise_rate = args.noise_rate
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    for seed in (args.seeds or [0]):
        train, test, _ = load_data(spec, seed)
        SD.save_dataset(train, out / f"train_seed{seed}.snld")
        SD.save_dataset(test, out / f"test_seed{seed}.snld")
        print(f"seed {seed}: {len(train)} train ({int((~train.clean_mask).sum())} corrupted), {len(test)} test -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    for r in run(cfg):
        print(f"{r['name']}: best_test_acc={r['best_test_acc']:.4f} at epoch {r['best_epoch']}")
    return 0


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    if args.rho_grid:
        rows = sweep(cfg, rho_grid=_floats(args.rho_grid))
    elif args.gamma_grid:
        rows = sweep(cfg, gamma_grid=_gamma_pairs(args.gamma_grid))
    else:
        print("sweep needs --rho-grid or --gamma-grid", file=sys.stderr)
        return 2
    for r in rows:
        print(f"{r['value']}: {r['mean_best_test_acc']:.4f} +- {r['std_best_test_acc']:.4f}")
    return 0


def cmd_verify(args) -> int:
    reports = oracle.run_all(args.seed_value)
    print(oracle.format_table(reports))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        oracle.write_json(reports, Path(args.out) / "oracle.json")
    return 0 if all(r.passed for r in reports) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="samnoise", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write toy / desk datasets as SNLD files")
    p.add_argument("--data", default="toy")
    p.add_argument("--noise-rate", type=float)
    p.add_argument("--seed", type=int, action="append", dest="seeds")
    p.add_argument("--out", type=Path)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train every configured seed")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="grid over rho or (gamma_z, gamma_v)")
    _common(p)
    p.add_argument("--rho-grid", help="comma separated, e.g. 0,0.03,0.06")
    p.add_argument("--gamma-grid", help="comma separated gz:gv pairs")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="run the oracle checks")
    p.add_argument("--seed", type=int, default=0, dest="seed_value")
    p.add_argument("--out", type=Path)
    p.set_defaults(fn=cmd_verify)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except (OSError, ValueError) as exc:
        print(f"samnoise: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
