"""Synthetic slender-object scenes, COCO-style annotation I/O, and random-crop augmentation.

All randomness goes through Philox (a counter-based 64-bit generator) keyed
by integer tuples such as ``(seed, image_id)``, so every image is reproducible
on its own and independent of generation order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig
from .matcher import GroundTruthSet

log = logging.getLogger(__name__)

CLASS_COLORS = np.array([
    [0.95, 0.25, 0.2], [0.2, 0.85, 0.3], [0.25, 0.35, 0.95], [0.95, 0.85, 0.2],
    [0.85, 0.3, 0.9], [0.2, 0.9, 0.9],
])


def philox(*key: int) -> np.random.Generator:
    """Generator keyed by up to two non-negative integers."""
    if len(key) > 2:
        raise ValueError("philox keys hold at most two words")
    words = np.array(list(key) + [0] * (2 - len(key)), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=words))


@dataclass
class SceneSpec:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 3
    min_aspect: float = 5.0
    max_aspect: float = 40.0
    min_length: float = 0.3  # fraction of the image side
    max_length: float = 0.8
    min_thickness: float = 2.0  # pixels
    rotation_deg: tuple[float, float] = (0.0, 180.0)
    contrast: float = 0.6
    noise: float = 0.05
    num_classes: int = 1
    seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        if self.min_aspect <= 1:
            raise ValueError("min_aspect must exceed 1")
        for lo, hi, name in ((self.min_objects, self.max_objects, "objects"),
                             (self.min_aspect, self.max_aspect, "aspect"),
                             (self.min_length, self.max_length, "length"),
                             (*self.rotation_deg, "rotation")):
            if lo > hi:
                raise ValueError(f"empty {name} range [{lo}, {hi}]")
        if self.min_objects < 0:
            raise ValueError("min_objects must be >= 0")

    @classmethod
    def from_config(cls, cfg: DataConfig, seed: int) -> "SceneSpec":
        return cls(image_size=cfg.image_size, min_objects=cfg.min_objects,
                   max_objects=cfg.max_objects, min_aspect=cfg.min_aspect,
                   max_aspect=cfg.max_aspect, min_length=cfg.min_length,
                   max_length=cfg.max_length, min_thickness=cfg.min_thickness,
                   rotation_deg=tuple(cfg.rotation_deg), contrast=cfg.contrast, noise=cfg.noise,
                   num_classes=cfg.synthetic_classes, seed=seed)


@dataclass
class AnnotatedImage:
    image: np.ndarray  # [3, H, W] in [0, 1]
    gts: GroundTruthSet
    image_id: int
    file_name: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


# ---------------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------------

def bar_coverage(size: int, center, length: float, thickness: float, angle: float,
                 window=None) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of a rotated rectangle on a size x size grid.

    Coverage is ``clip(0.5 - d, 0, 1)`` with ``d`` the box distance of the pixel
    center, i.e. a one-pixel linear ramp across the edge.
    """
    y0, y1, x0, x1 = window if window is not None else (0, size, 0, size)
    ys = np.arange(y0, y1) + 0.5
    xs = np.arange(x0, x1) + 0.5
    dy = ys[:, None] - center[1]
    dx = xs[None, :] - center[0]
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    dist = np.maximum(np.abs(u) - length / 2, np.abs(v) - thickness / 2)
    return np.clip(0.5 - dist, 0.0, 1.0)


def generate_scene(spec: SceneSpec, image_id: int) -> AnnotatedImage:
    """Render thin rotated bars over a noisy flat background.

    Ground-truth boxes are the tight pixel bounds of each bar's non-zero coverage.
    Pixel values are quantized to 8 bits so PNG export is lossless.
    """
    rng = philox(spec.seed, image_id)
    s = spec.image_size
    background = rng.uniform(0.25, 0.75)
    image = np.full((3, s, s), background)
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    labels, boxes = [], []
    for _ in range(count):
        for _attempt in range(spec.max_retries):
            length = rng.uniform(spec.min_length, spec.max_length) * s
            aspect = math.exp(rng.uniform(math.log(spec.min_aspect), math.log(spec.max_aspect)))
            thickness = max(length / aspect, spec.min_thickness)
            angle = math.radians(rng.uniform(*spec.rotation_deg))
            ex = abs(length / 2 * math.cos(angle)) + abs(thickness / 2 * math.sin(angle)) + 1
            ey = abs(length / 2 * math.sin(angle)) + abs(thickness / 2 * math.cos(angle)) + 1
            if 2 * ex < s and 2 * ey < s:
                break
        else:
            log.debug("image %d: object did not fit after %d tries, skipped", image_id, spec.max_retries)
            continue
        cx = rng.uniform(ex, s - ex)
        cy = rng.uniform(ey, s - ey)
        label = int(rng.integers(0, spec.num_classes))
        if spec.num_classes == 1:
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            color = np.full(3, np.clip(background + sign * spec.contrast, 0.0, 1.0))
        else:
            color = CLASS_COLORS[label % len(CLASS_COLORS)]
        win = (max(int(cy - ey), 0), min(int(math.ceil(cy + ey)) + 1, s),
               max(int(cx - ex), 0), min(int(math.ceil(cx + ex)) + 1, s))
        cov = bar_coverage(s, (cx, cy), length, thickness, angle, win)
        rows = np.flatnonzero(cov.max(axis=1) > 0)
        cols = np.flatnonzero(cov.max(axis=0) > 0)
        if rows.size == 0 or cols.size == 0:
            continue
        region = image[:, win[0]:win[1], win[2]:win[3]]
        image[:, win[0]:win[1], win[2]:win[3]] = region * (1 - cov) + color[:, None, None] * cov
        x0, x1 = win[2] + cols[0], win[2] + cols[-1] + 1
        y0, y1 = win[0] + rows[0], win[0] + rows[-1] + 1
        labels.append(label)
        boxes.append([(x0 + x1) / 2 / s, (y0 + y1) / 2 / s, (x1 - x0) / s, (y1 - y0) / s])
    image = np.round(np.clip(image, 0.0, 1.0) * 255) / 255
    gts = GroundTruthSet(np.array(labels, dtype=np.int64), np.array(boxes).reshape(-1, 4))
    return AnnotatedImage(image.astype(np.float32), gts, image_id, f"{image_id:06d}.png")


def generate_dataset(spec: SceneSpec, count: int, first_id: int = 0) -> list[AnnotatedImage]:
    return [generate_scene(spec, first_id + i) for i in range(count)]


# ---------------------------------------------------------------------------------
# COCO-style annotation files
# ---------------------------------------------------------------------------------

@dataclass
class LoadStats:
    images: int = 0
    annotations: int = 0
    skipped_category: int = 0
    malformed: int = 0
    missing_images: int = 0
    diagnostics: list[str] = field(default_factory=list)


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_coco_annotations(annotation_file, image_dir, categories: list[str] | None = None,
                          load_images: bool = True):
    """Read a COCO-style file into :class:`AnnotatedImage` records.

    Categories are remapped to dense ids in the order of ``categories`` (or of
    the file's category ids when no filter is given).  Crowd annotations are
    kept with ``iscrowd`` set; training drops them and evaluation ignores them.
    Returns ``(dataset, class_names, stats)``.
    """
    doc = json.loads(Path(annotation_file).read_text())
    stats = LoadStats()
    cats = {c["id"]: c["name"] for c in doc.get("categories", [])}
    if categories:
        names = [n for n in categories]
        by_name = {name: i for i, name in enumerate(names)}
        dense = {cid: by_name[name] for cid, name in cats.items() if name in by_name}
    else:
        ordered = sorted(cats)
        names = [cats[c] for c in ordered]
        dense = {cid: i for i, cid in enumerate(ordered)}

    images = {}
    for rec in doc.get("images", []):
        try:
            images[rec["id"]] = (rec["file_name"], int(rec["width"]), int(rec["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            stats.malformed += 1
            stats.diagnostics.append(f"image record {rec!r}: {exc!r}")

    per_image: dict[int, list] = {i: [] for i in images}
    for ann in doc.get("annotations", []):
        try:
            image_id = ann["image_id"]
            bbox = [float(v) for v in ann["bbox"]]
            if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
                raise ValueError(f"bad bbox {ann['bbox']!r}")
            if image_id not in images:
                raise ValueError(f"unknown image id {image_id!r}")
            cid = ann["category_id"]
        except (KeyError, TypeError, ValueError) as exc:
            stats.malformed += 1
            stats.diagnostics.append(f"annotation {ann.get('id', '?')}: {exc}")
            continue
        if cid not in dense:
            stats.skipped_category += 1
            continue
        _, w, h = images[image_id]
        x, y, bw, bh = bbox
        per_image[image_id].append((dense[cid], [(x + bw / 2) / w, (y + bh / 2) / h, bw / w, bh / h],
                                    bool(ann.get("iscrowd", 0))))
        stats.annotations += 1

    dataset = []
    for image_id, (file_name, w, h) in images.items():
        path = Path(image_dir) / file_name
        if load_images:
            if not path.exists():
                stats.missing_images += 1
                continue
            image = read_image(path)
        else:
            image = np.zeros((3, h, w), dtype=np.float32)
        anns = per_image[image_id]
        gts = GroundTruthSet(np.array([a[0] for a in anns], dtype=np.int64),
                             np.array([a[1] for a in anns]).reshape(-1, 4),
                             np.array([a[2] for a in anns], dtype=bool))
        dataset.append(AnnotatedImage(image, gts, int(image_id), file_name))
        stats.images += 1
    if stats.missing_images:
        log.warning("%d referenced images were missing and skipped", stats.missing_images)
    return dataset, names, stats


def export_coco(dataset: list[AnnotatedImage], out_dir, class_names: list[str]) -> Path:
    """Write PNG images plus ``annotations.json`` in the same schema the loader reads."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for sample in dataset:
        h, w = sample.height, sample.width
        pixels = np.round(sample.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(out / "images" / sample.file_name)
        images.append({"id": sample.image_id, "file_name": sample.file_name, "width": w, "height": h})
        for label, box, crowd in zip(sample.gts.labels, sample.gts.boxes, sample.gts.iscrowd):
            cx, cy, bw, bh = box
            bbox = [(cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h]
            annotations.append({"id": ann_id, "image_id": sample.image_id,
                                "category_id": int(label) + 1, "bbox": [round(v, 6) for v in bbox],
                                "area": bbox[2] * bbox[3], "iscrowd": int(crowd)})
            ann_id += 1
    doc = {"images": images, "annotations": annotations,
           "categories": [{"id": i + 1, "name": n} for i, n in enumerate(class_names)]}
    path = out / "annotations.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


# ---------------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------------

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of a [C, H, W] array."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo)

    ylo, yhi, fy = axis(h, out_h)
    xlo, xhi, fx = axis(w, out_w)
    rows = image[:, ylo] * (1 - fy)[None, :, None] + image[:, yhi] * fy[None, :, None]
    out = rows[:, :, xlo] * (1 - fx) + rows[:, :, xhi] * fx
    return out.astype(image.dtype)


def crop_sample(sample: AnnotatedImage, x0: int, y0: int, cw: int, ch: int, out_size: int,
                visibility: float = 0.25) -> AnnotatedImage:
    """Crop to [x0, x0+cw) x [y0, y0+ch), clip boxes, drop mostly-cut boxes, resize."""
    h, w = sample.height, sample.width
    if not (0 <= x0 and 0 <= y0 and cw >= 1 and ch >= 1 and x0 + cw <= w and y0 + ch <= h):
        raise ValueError(f"crop ({x0}, {y0}, {cw}, {ch}) outside {w}x{h} image")
    gts = sample.gts
    keep_labels, keep_boxes, keep_crowd = [], [], []
    if len(gts):
        cx, cy, bw, bh = (gts.boxes * [w, h, w, h]).T
        bx0, by0, bx1, by1 = cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2
        nx0, ny0 = np.maximum(bx0, x0), np.maximum(by0, y0)
        nx1, ny1 = np.minimum(bx1, x0 + cw), np.minimum(by1, y0 + ch)
        nw, nh = np.clip(nx1 - nx0, 0, None), np.clip(ny1 - ny0, 0, None)
        ok = (nw > 0) & (nh > 0) & (nw * nh >= visibility * bw * bh)
        for i in np.flatnonzero(ok):
            keep_labels.append(gts.labels[i])
            keep_boxes.append([((nx0[i] + nx1[i]) / 2 - x0) / cw, ((ny0[i] + ny1[i]) / 2 - y0) / ch,
                               nw[i] / cw, nh[i] / ch])
            keep_crowd.append(gts.iscrowd[i])
    image = resize_bilinear(sample.image[:, y0:y0 + ch, x0:x0 + cw], out_size, out_size)
    new_gts = GroundTruthSet(np.array(keep_labels, dtype=np.int64),
                             np.array(keep_boxes).reshape(-1, 4), np.array(keep_crowd, dtype=bool))
    return AnnotatedImage(image, new_gts, sample.image_id, sample.file_name)


def random_crop_augment(sample: AnnotatedImage, rng: np.random.Generator, out_size: int,
                        min_scale: float = 0.6, visibility: float = 0.25) -> AnnotatedImage:
    h, w = sample.height, sample.width
    cw = max(1, int(round(w * rng.uniform(min_scale, 1.0))))
    ch = max(1, int(round(h * rng.uniform(min_scale, 1.0))))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    return crop_sample(sample, x0, y0, cw, ch, out_size, visibility)


def prepare_sample(sample: AnnotatedImage, out_size: int) -> AnnotatedImage:
    """Resize to the square training resolution (normalized boxes are unchanged)."""
    if sample.height == out_size and sample.width == out_size:
        return sample
    return AnnotatedImage(resize_bilinear(sample.image, out_size, out_size), sample.gts,
                          sample.image_id, sample.file_name)


def normalize_images(batch: np.ndarray) -> np.ndarray:
    return (batch - 0.5) / 0.25
