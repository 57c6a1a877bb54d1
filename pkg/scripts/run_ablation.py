"""DFAM on/off ablation on generated scenes with matched seeds and budgets.

Both variants train on the same scenes in the same order; summary.json under
--out records final AP/AP50, their deltas and epochs-to-threshold.

``--from-runs ON OFF`` skips training and summarizes two finished run
directories instead (for example the outputs of ``run_synthetic.py`` with and
without ``--no-dfam``, which use identical settings).
"""

import argparse
import json
import logging
from pathlib import Path

from dfam_detr.config import config_to_dict, load_config, toy_config
from dfam_detr.train import ablation_summary, config_from_checkpoint, history_from_checkpoint, run_ablation


def summarize_runs(on_dir: Path, off_dir: Path, out: Path) -> dict:
    on_ckpt, off_ckpt = on_dir / "checkpoint.ckpt", off_dir / "checkpoint.ckpt"
    a = config_to_dict(config_from_checkpoint(on_ckpt))
    b = config_to_dict(config_from_checkpoint(off_ckpt))
    differing = sorted(k for k in a if a[k] != b[k] and k != "train.out_dir")
    if differing != ["backbone.dfam"] or not a["backbone.dfam"] or b["backbone.dfam"]:
        raise SystemExit(f"runs are not a matched DFAM on/off pair; differing keys: {differing}")
    return ablation_summary(history_from_checkpoint(on_ckpt), history_from_checkpoint(off_ckpt),
                            out, {"dfam_on": on_dir, "dfam_off": off_dir})


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--config", default=None)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--train-images", type=int, default=2000)
    ap.add_argument("--val-images", type=int, default=200)
    ap.add_argument("--from-runs", nargs=2, metavar=("ON_DIR", "OFF_DIR"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.from_runs:
        summary = summarize_runs(Path(args.from_runs[0]), Path(args.from_runs[1]), Path(args.out))
    else:
        cfg = load_config(args.config) if args.config else toy_config()
        cfg.train.epochs = args.epochs
        cfg.data.num_train, cfg.data.num_val = args.train_images, args.val_images
        summary = run_ablation(cfg, args.out)
    print(json.dumps({k: v for k, v in summary.items() if k != "curves"}, indent=2))


if __name__ == "__main__":
    main()
