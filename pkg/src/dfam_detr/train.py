"""Training loop, evaluation, checkpoint lifecycle and the DFAM on/off ablation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .config import RunConfig, config_to_dict, dict_to_config, dump_config
from .data import (AnnotatedImage, SceneSpec, generate_dataset, load_coco_annotations,
                   normalize_images, philox, prepare_sample, random_crop_augment)
from .evaluation import APReport, decode_detections, evaluate_ap
from .matcher import set_loss
from .optim import Adam, clip_grad_norm
from .transformer import build_model

log = logging.getLogger(__name__)

CSV_COLUMNS = ["epoch", "loss_total", "loss_cls", "loss_l1", "loss_giou", "ap", "ap50"]
VAL_ID_OFFSET = 1_000_000
_ORDER_STREAM = 1 << 62
_AUGMENT_STREAM = 2 << 62


class TrainingError(RuntimeError):
    pass


@dataclass
class Datasets:
    train: list[AnnotatedImage]
    val: list[AnnotatedImage]
    class_names: list[str]


def build_datasets(cfg: RunConfig) -> Datasets:
    d = cfg.data
    if d.source == "synthetic":
        spec = SceneSpec.from_config(d, cfg.train.seed)
        names = [f"slender_{i}" for i in range(d.synthetic_classes)]
        return Datasets(generate_dataset(spec, d.num_train),
                        generate_dataset(spec, d.num_val, VAL_ID_OFFSET), names)
    if d.source == "coco":
        train, names, stats = load_coco_annotations(d.coco_annotations, d.coco_images, d.categories or None)
        log.info("loaded %d training images (%d skipped by category, %d malformed, %d missing)",
                 stats.images, stats.skipped_category, stats.malformed, stats.missing_images)
        if d.coco_val_annotations:
            val, _, _ = load_coco_annotations(d.coco_val_annotations, d.coco_val_images or d.coco_images,
                                              d.categories or None)
        else:
            val = train
        return Datasets(train, val, names)
    raise ValueError(f"unknown data.source {d.source!r}")


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return philox(seed, _ORDER_STREAM | epoch).permutation(n)


def make_batch(samples: list[AnnotatedImage], cfg: RunConfig, epoch: int | None):
    """Stack a batch at the training resolution; ``epoch`` enables seeded augmentation."""
    size = cfg.data.image_size
    images, gts = [], []
    for s in samples:
        if epoch is not None and cfg.data.augment:
            rng = philox(cfg.train.seed, _AUGMENT_STREAM | (epoch << 32) | s.image_id)
            if rng.uniform() < cfg.data.crop_prob:
                s = random_crop_augment(s, rng, size, cfg.data.crop_min_scale, cfg.data.visibility)
        s = prepare_sample(s, size)
        images.append(s.image)
        gts.append(s.gts)
    batch = normalize_images(np.stack(images)).astype(T.get_dtype())
    return T.Tensor(batch), gts


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_l1: float
    loss_giou: float
    ap: float | None = None
    ap50: float | None = None

    def row(self) -> list:
        return [self.epoch, self.loss_total, self.loss_cls, self.loss_l1, self.loss_giou,
                "" if self.ap is None else self.ap, "" if self.ap50 is None else self.ap50]


@dataclass
class Trainer:
    cfg: RunConfig
    data: Datasets
    out_dir: Path
    model: object = None
    optimizer: Adam = None
    epoch: int = 0
    history: list[EpochStats] = field(default_factory=list)
    step_losses: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.cfg.validate()
        T.set_precision(self.cfg.train.precision)
        self.out_dir = Path(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.model is None:
            self.model = build_model(self.cfg)
        if self.optimizer is None:
            self.optimizer = Adam.for_model(self.model, self.cfg.optim)
        (self.out_dir / "config.cfg").write_text(dump_config(self.cfg))

    # -- training ------------------------------------------------------------------
    def train_step(self, images, gts, epoch: int, batch_index: int) -> dict:
        self.model.zero_grad()
        outputs = self.model(images)
        if not all(np.isfinite(o.logits.data).all() and np.isfinite(o.boxes.data).all()
                   for o in outputs):
            raise TrainingError(f"non-finite predictions at epoch {epoch}, batch {batch_index}")
        loss, report, _ = set_loss(outputs, gts, self.cfg.loss)
        if not math.isfinite(report.total):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_index}: "
                                f"{report.as_dict()}")
        loss.backward()
        params = self.model.parameters()
        norm = clip_grad_norm(params, self.cfg.optim.clip_max_norm)
        if not math.isfinite(norm):
            raise TrainingError(f"non-finite gradient norm at epoch {epoch}, batch {batch_index}: "
                                f"{report.as_dict()}")
        self.optimizer.step()
        return report.as_dict()

    def train_epoch(self, epoch: int) -> EpochStats:
        cfg = self.cfg
        self.optimizer.set_epoch(epoch, cfg.optim.lr_drop_epochs, cfg.optim.lr_decay)
        order = epoch_order(len(self.data.train), cfg.train.seed, epoch)
        bs = cfg.train.batch_size
        sums = {k: 0.0 for k in CSV_COLUMNS[1:5]}
        steps = 0
        for bi, start in enumerate(range(0, len(order), bs)):
            if cfg.train.max_steps and len(self.step_losses) >= cfg.train.max_steps:
                break
            samples = [self.data.train[i] for i in order[start:start + bs]]
            images, gts = make_batch(samples, cfg, epoch)
            terms = self.train_step(images, gts, epoch, bi)
            self.step_losses.append({"step": len(self.step_losses) + 1, "epoch": epoch, **terms})
            for k in sums:
                sums[k] += terms[k]
            steps += 1
        steps = max(steps, 1)
        return EpochStats(epoch + 1, *(sums[k] / steps for k in CSV_COLUMNS[1:5]))

    def fit(self, epochs: int | None = None, evaluate_every: int | None = None) -> list[EpochStats]:
        epochs = self.cfg.train.epochs if epochs is None else epochs
        every = self.cfg.train.eval_every if evaluate_every is None else evaluate_every
        while self.epoch < epochs:
            t0 = time.time()
            stats = self.train_epoch(self.epoch)
            self.epoch += 1
            if every and (self.epoch % every == 0 or self.epoch == epochs):
                rep = self.evaluate(self.data.val)
                stats.ap, stats.ap50 = rep.ap, rep.ap50
            self.history.append(stats)
            self.write_curves()
            log.info("epoch %d/%d loss %.4f (cls %.4f l1 %.4f giou %.4f) ap50 %s [%.0fs]",
                     self.epoch, epochs, stats.loss_total, stats.loss_cls, stats.loss_l1,
                     stats.loss_giou, stats.ap50, time.time() - t0)
            ce = self.cfg.train.checkpoint_every
            if ce and (self.epoch % ce == 0 or self.epoch == epochs):
                self.save_checkpoint(self.out_dir / "checkpoint.ckpt")
            if self.cfg.train.max_steps and len(self.step_losses) >= self.cfg.train.max_steps:
                break
        return self.history

    # -- inference -----------------------------------------------------------------
    def predict(self, dataset: list[AnnotatedImage]):
        cfg = self.cfg
        preds = []
        with T.no_grad():
            for start in range(0, len(dataset), max(cfg.train.batch_size, 4)):
                images, _ = make_batch(dataset[start:start + max(cfg.train.batch_size, 4)], cfg, None)
                last = self.model(images)[-1]
                for i in range(images.shape[0]):
                    preds.append(decode_detections(last.logits.data[i], last.boxes.data[i],
                                                   cfg.train.max_detections, cfg.train.score_floor))
        return preds

    def evaluate(self, dataset: list[AnnotatedImage]) -> APReport:
        size = self.cfg.data.image_size
        preds = self.predict(dataset)
        return evaluate_ap(preds, [s.gts for s in dataset], [(size, size)] * len(dataset),
                           self.cfg.model.num_classes, max_detections=self.cfg.train.max_detections)

    # -- files -----------------------------------------------------------------------
    def write_curves(self) -> None:
        with open(self.out_dir / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for s in self.history:
                w.writerow(s.row())
        with open(self.out_dir / "steps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", *CSV_COLUMNS[1:5]])
            for s in self.step_losses:
                w.writerow([s["step"], s["epoch"], *(s[k] for k in CSV_COLUMNS[1:5])])

    def save_checkpoint(self, path) -> None:
        tensors = {f"model.{n}": p.data for n, p in self.model.named_parameters()}
        opt_tensors, opt_meta = self.optimizer.state()
        tensors.update(opt_tensors)
        meta = {"epoch": self.epoch, "optimizer": opt_meta, "precision": T.get_precision(),
                "config": config_to_dict(self.cfg),
                "history": [s.__dict__ for s in self.history],
                "step_losses": self.step_losses}
        save_tensors(path, tensors, meta)

    def load_checkpoint(self, path) -> None:
        tensors, meta = load_tensors(path)
        self.model.load_state_dict({k[len("model."):]: v for k, v in tensors.items()
                                    if k.startswith("model.")})
        self.optimizer.load_state(tensors, meta["optimizer"])
        self.epoch = int(meta["epoch"])
        self.history = [EpochStats(**h) for h in meta.get("history", [])]
        self.step_losses = list(meta.get("step_losses", []))


def config_from_checkpoint(path) -> RunConfig:
    _, meta = load_tensors(path)
    return dict_to_config(meta["config"])


def write_metric_record(path, report: APReport, extra: dict | None = None) -> None:
    record = {**report.as_dict(), **(extra or {})}
    Path(path).write_text(json.dumps(record, indent=2))


# ---------------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------------

def epochs_to_reach(curve: list[float | None], target: float | None) -> int | None:
    if target is None:
        return None
    for i, v in enumerate(curve):
        if v is not None and v >= target:
            return i + 1
    return None


def run_ablation(cfg: RunConfig, out_dir, data: Datasets | None = None) -> dict:
    """Train DFAM-on and DFAM-off variants with identical seeds, data and budgets."""
    out = Path(out_dir)
    data = build_datasets(cfg) if data is None else data
    results = {}
    for name, flag in (("dfam_on", True), ("dfam_off", False)):
        variant = copy.deepcopy(cfg)
        variant.backbone.dfam = flag
        trainer = Trainer(variant, data, out / name)
        trainer.fit()
        results[name] = trainer.history
    return ablation_summary(results["dfam_on"], results["dfam_off"], out,
                            {"dfam_on": out / "dfam_on", "dfam_off": out / "dfam_off"})


def history_from_checkpoint(path) -> list[EpochStats]:
    _, meta = load_tensors(path)
    return [EpochStats(**h) for h in meta.get("history", [])]


def ablation_summary(on: list[EpochStats], off: list[EpochStats], out_dir,
                     run_dirs: dict | None = None) -> dict:
    """Compare two training histories and write ``summary.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ap50_on = [s.ap50 for s in on]
    ap50_off = [s.ap50 for s in off]
    base_final = ap50_off[-1] if ap50_off else None
    summary = {
        "epochs": len(on),
        "final": {k: {"ap": v[-1].ap, "ap50": v[-1].ap50, "loss_total": v[-1].loss_total}
                  for k, v in (("dfam_on", on), ("dfam_off", off))},
        "ap50_delta": (None if ap50_on[-1] is None or base_final is None
                       else ap50_on[-1] - base_final),
        "ap_delta": (None if on[-1].ap is None or off[-1].ap is None else on[-1].ap - off[-1].ap),
        "baseline_final_ap50": base_final,
        "dfam_epochs_to_baseline_final_ap50": epochs_to_reach(ap50_on, base_final),
        "baseline_epochs_to_own_final_ap50": epochs_to_reach(ap50_off, base_final),
        "curves": {k: str(Path(d) / "curves.csv") for k, d in (run_dirs or {}).items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# ---------------------------------------------------------------------------------
# memorization probe
# ---------------------------------------------------------------------------------

def run_memorization(cfg: RunConfig, out_dir, images: int = 4, steps: int = 500,
                     eval_every: int = 25) -> dict:
    """Overfit ``images`` un-augmented training scenes for at most ``steps`` updates.

    The learning rate stays constant and evaluation runs on the training
    images themselves.  Returns the first-step and final-epoch losses, the
    relative drop between them and the final AP50.
    """
    cfg = copy.deepcopy(cfg)
    cfg.data.num_train = cfg.data.num_val = images
    cfg.data.augment = False
    cfg.optim.lr_drop_epochs = 0
    cfg.train.max_steps = steps
    cfg.train.epochs = math.ceil(steps / math.ceil(images / cfg.train.batch_size))
    cfg.train.eval_every = eval_every
    cfg.train.checkpoint_every = 0
    data = build_datasets(cfg)
    data.val = data.train
    t0 = time.time()
    trainer = Trainer(cfg, data, out_dir)
    trainer.fit()
    first = trainer.step_losses[0]["loss_total"]
    last = trainer.history[-1].loss_total
    report = trainer.evaluate(data.train)
    result = {"steps": len(trainer.step_losses), "first_step_loss": first,
              "final_epoch_loss": last, "loss_drop": 1 - last / first,
              "ap50": report.ap50, "ap": report.ap,
              "first_epoch_ap50_1": epochs_to_reach([s.ap50 for s in trainer.history], 1.0),
              "elapsed_s": time.time() - t0}
    (Path(out_dir) / "memorization.json").write_text(json.dumps(result, indent=2))
    return result
