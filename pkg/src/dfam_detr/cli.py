"""Command-line entry point: train, eval, gradcheck, ablate, generate-data.

Set ``DFAM_DETR_THREADS`` to cap the BLAS thread pool; nothing else is read
from the environment.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .config import PROFILES, ConfigError, RunConfig, apply_overrides, load_config, parse_value
from .data import SceneSpec, export_coco, generate_dataset
from .gradcheck import SCOPES, format_table, run_suite
from .tensor import ShapeError
from .train import (VAL_ID_OFFSET, Trainer, TrainingError, build_datasets, config_from_checkpoint,
                    run_ablation, write_metric_record)

THREADS_ENV = "DFAM_DETR_THREADS"
log = logging.getLogger("dfam_detr")


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = parse_value(value)
    return out


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    profile = PROFILES[args.profile]() if getattr(args, "profile", None) else None
    if getattr(args, "config", None):
        cfg = load_config(args.config, profile)
    elif base is not None:
        cfg = base
    else:
        cfg = profile or PROFILES["toy"]()
    apply_overrides(cfg, _parse_set(getattr(args, "set", None) or []))
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "precision", None):
        cfg.train.precision = args.precision
    if getattr(args, "out", None):
        cfg.train.out_dir = args.out
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    trainer = Trainer(cfg, build_datasets(cfg), Path(cfg.train.out_dir))
    if args.checkpoint:
        trainer.load_checkpoint(args.checkpoint)
        log.info("resumed from %s at epoch %d", args.checkpoint, trainer.epoch)
    trainer.fit()
    report = trainer.evaluate(trainer.data.val)
    write_metric_record(Path(cfg.train.out_dir) / "metrics.json", report, {"epochs": trainer.epoch})
    print(report.summary())
    return 0


def cmd_eval(args) -> int:
    base = config_from_checkpoint(args.checkpoint)
    cfg = resolve_config(args, base)
    data = build_datasets(cfg)
    trainer = Trainer(cfg, data, Path(cfg.train.out_dir))
    trainer.load_checkpoint(args.checkpoint)
    split = data.train if args.split == "train" else data.val
    report = trainer.evaluate(split)
    out = Path(cfg.train.out_dir) / f"metrics_{args.split}.json"
    write_metric_record(out, report, {"checkpoint": str(args.checkpoint), "split": args.split,
                                      "images": len(split)})
    print(report.summary())
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.scope)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"({sum(r.seconds for r in results):.1f}s)")
    return 1 if failed else 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    summary = run_ablation(cfg, Path(cfg.train.out_dir))
    print(json.dumps({k: v for k, v in summary.items() if k != "curves"}, indent=2))
    return 0


def cmd_generate_data(args) -> int:
    cfg = resolve_config(args)
    spec = SceneSpec.from_config(cfg.data, cfg.train.seed)
    names = [f"slender_{i}" for i in range(cfg.data.synthetic_classes)]
    out = Path(cfg.train.out_dir)
    train = export_coco(generate_dataset(spec, cfg.data.num_train), out / "train", names)
    val = export_coco(generate_dataset(spec, cfg.data.num_val, VAL_ID_OFFSET), out / "val", names)
    print(f"wrote {train} and {val}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfam-detr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint_required=False):
        sp.add_argument("--config", help="flat section.key = value file")
        sp.add_argument("--profile", choices=sorted(PROFILES))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--precision", choices=["float32", "float64"])
        sp.add_argument("--out", help="output directory (train.out_dir)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--checkpoint", required=checkpoint_required)

    sp = sub.add_parser("train", help="train and write curves, checkpoints and metrics")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, checkpoint_required=True)
    sp.add_argument("--split", choices=["train", "val"], default="val")
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("gradcheck", help="finite-difference check of every backward")
    sp.add_argument("--scope", choices=SCOPES)
    sp.set_defaults(func=cmd_gradcheck)
    sp = sub.add_parser("ablate", help="train DFAM on and off with identical seeds")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    sp = sub.add_parser("generate-data", help="export the synthetic dataset as COCO JSON + PNG")
    common(sp)
    sp.set_defaults(func=cmd_generate_data)
    return p


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(value))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ShapeError as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
