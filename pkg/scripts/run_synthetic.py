"""Toy-profile training on 2000 generated scenes, evaluated on 200 held-out scenes.

Writes curves.csv, steps.csv, checkpoint.ckpt and metrics.json under --out.
Re-running with an existing checkpoint resumes where it stopped.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from dfam_detr.config import load_config, toy_config
from dfam_detr.train import Trainer, build_datasets, write_metric_record


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--config", default=None)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--no-dfam", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config) if args.config else toy_config()
    cfg.train.epochs = args.epochs
    cfg.data.num_train, cfg.data.num_val = 2000, 200
    cfg.backbone.dfam = not args.no_dfam
    out = Path(args.out)
    trainer = Trainer(cfg, build_datasets(cfg), out)
    ckpt = out / "checkpoint.ckpt"
    if ckpt.exists():
        trainer.load_checkpoint(ckpt)
        logging.info("resumed at epoch %d", trainer.epoch)
    t0 = time.time()
    trainer.fit()
    report = trainer.evaluate(trainer.data.val)
    prior = json.loads((out / "metrics.json").read_text()).get("elapsed_s", 0) if (out / "metrics.json").exists() else 0
    write_metric_record(out / "metrics.json", report,
                        {"epochs": trainer.epoch, "num_train": len(trainer.data.train),
                         "num_val": len(trainer.data.val), "dfam": cfg.backbone.dfam,
                         "elapsed_s": prior + time.time() - t0})
    print(report.summary())


if __name__ == "__main__":
    main()
