"""Overfit four generated scenes with the toy profile and report the loss drop and AP50."""

import argparse
import json
import logging

from dfam_detr.config import load_config, toy_config
from dfam_detr.train import run_memorization


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/memorization")
    ap.add_argument("--config", default=None)
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config) if args.config else toy_config()
    print(json.dumps(run_memorization(cfg, args.out, steps=args.steps), indent=2))


if __name__ == "__main__":
    main()
