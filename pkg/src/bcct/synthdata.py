"""Synthetic dataset: flat-filled shapes over procedural textures, plus a
small pool of background-only images, with exact ground-truth boxes/masks.

On disk: binary PPM images, PGM masks (by the <stem>.mask.pgm convention),
JSON-Lines manifests per split and a meta.json carrying the generator seed,
parameters, class names and per-channel normalization statistics.

All generation is a pure function of (seed, parameters); pixels are quantized
to the 8-bit grid before leaving the generator, so save/load round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import pnm
from .seeding import spawn_rng

SHAPE_NAMES = ("disk", "square", "triangle", "ring", "cross", "diamond", "star", "bar")
TEXTURE_FAMILIES = ("sky", "stripes", "blotch", "diagonal")

AREA_LO, AREA_HI = 0.10, 0.40        # accepted foreground area fraction
_TARGET_LO, _TARGET_HI = 0.12, 0.38  # sampled target range, margin for rasterization
MIN_COLOR_DIST = 0.3


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray                 # (3,H,W) float32 in [0,1]
    label: Optional[int]
    is_background: bool
    gt_box: Optional[tuple] = None     # (x0,y0,x1,y1) inclusive-exclusive
    gt_mask: Optional[np.ndarray] = None  # (H,W) uint8 {0,1}
    image_id: Optional[str] = None


# ---------------------------------------------------------------------------
# textures


def _quantize(px):
    return (np.round(np.clip(px, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _tex_sky(rng, h, w):
    top = rng.uniform(0.45, 0.85, 3)
    bottom = rng.uniform(0.15, 0.55, 3)
    t = np.linspace(0.0, 1.0, h)[None, :, None]
    px = top[:, None, None] * (1 - t) + bottom[:, None, None] * t
    px = px + rng.normal(0.0, 0.015, (3, h, w))
    return px


def _tex_stripes(rng, h, w):
    base = rng.uniform(0.2, 0.6, 3)
    period = rng.uniform(3.0, 9.0)
    phase = rng.uniform(0.0, 2 * math.pi)
    amp = rng.uniform(0.05, 0.18)
    rows = amp * np.sin(2 * math.pi * np.arange(h) / period + phase)
    px = base[:, None, None] + rows[None, :, None]
    px = px + rng.uniform(-0.06, 0.06, (3, h, w))
    return px


def _tex_blotch(rng, h, w):
    gh, gw = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    coarse = rng.uniform(0.15, 0.85, (3, gh, gw))
    from .tensor import resize_bilinear
    px = resize_bilinear(coarse, h, w)
    px = px + rng.normal(0.0, 0.02, (3, h, w))
    return px


def _tex_diagonal(rng, h, w):
    c0 = rng.uniform(0.15, 0.85, 3)
    c1 = rng.uniform(0.15, 0.85, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    t = ((yy + xx) / (h + w - 2))[None]
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


_TEXTURES = {"sky": _tex_sky, "stripes": _tex_stripes, "blotch": _tex_blotch,
             "diagonal": _tex_diagonal}


def texture(family: str, rng, h: int, w: int) -> np.ndarray:
    """Unquantized (3,H,W) texture in roughly [0,1]; clipped by the caller."""
    return _TEXTURES[family](rng, h, w)


# ---------------------------------------------------------------------------
# shapes


def _poly_mask(verts, h, w):
    """Even-odd rasterization: crossing-number test at pixel centers."""
    yy, xx = np.mgrid[0:h, 0:w]
    px = xx + 0.0
    py = yy + 0.0
    inside = np.zeros((h, w), dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        crosses = ((y0 <= py) & (py < y1)) | ((y1 <= py) & (py < y0))
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xi)
    return inside


def _star_verts(cx, cy, r_outer):
    pts = []
    r_inner = 0.45 * r_outer
    for i in range(10):
        ang = -math.pi / 2 + i * math.pi / 5
        r = r_outer if i % 2 == 0 else r_inner
        pts.append((cx + r * math.cos(ang), cy + r * math.sin(ang)))
    return pts


_STAR_UNIT_AREA = None


def _star_unit_area():
    global _STAR_UNIT_AREA
    if _STAR_UNIT_AREA is None:
        verts = _star_verts(0.0, 0.0, 1.0)
        s = 0.0
        for i in range(len(verts)):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % len(verts)]
            s += x0 * y1 - x1 * y0
        _STAR_UNIT_AREA = abs(s) / 2.0
    return _STAR_UNIT_AREA


def _raster_shape(shape: str, rng, h, w, target_area):
    """Returns (mask uint8, extent) or None if the draw fell outside the
    image; caller retries with fresh draws."""
    if shape == "disk":
        r = math.sqrt(target_area / math.pi)
        ext = r
    elif shape == "square":
        s = math.sqrt(target_area) / 2.0
        ext = s
    elif shape == "triangle":
        a = math.sqrt(4.0 * target_area / math.sqrt(3.0))
        ext = a / math.sqrt(3.0)  # circumradius
    elif shape == "ring":
        r = math.sqrt(target_area / (math.pi * (1.0 - 0.55 ** 2)))
        ext = r
    elif shape == "cross":
        s = math.sqrt(target_area / 2.04)
        ext = s
    elif shape == "diamond":
        r = math.sqrt(target_area / 2.0)
        ext = r
    elif shape == "star":
        r = math.sqrt(target_area / _star_unit_area())
        ext = r
    elif shape == "bar":
        ll = math.sqrt(target_area / 0.88)
        ext = ll
    else:
        raise ValueError(f"unknown shape '{shape}'")

    margin = ext + 1.0
    if 2 * margin >= min(h, w):
        return None
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx

    if shape == "disk":
        m = dx * dx + dy * dy <= ext * ext
    elif shape == "square":
        m = np.maximum(np.abs(dx), np.abs(dy)) <= ext
    elif shape == "triangle":
        a = math.sqrt(4.0 * target_area / math.sqrt(3.0))
        hh = a * math.sqrt(3.0) / 2.0
        v = [(cx, cy - 2 * hh / 3), (cx - a / 2, cy + hh / 3), (cx + a / 2, cy + hh / 3)]
        m = _poly_mask(v, h, w)
    elif shape == "ring":
        d2 = dx * dx + dy * dy
        m = (d2 <= ext * ext) & (d2 >= (0.55 * ext) ** 2)
    elif shape == "cross":
        t = 0.3 * ext
        m = ((np.abs(dx) <= t) & (np.abs(dy) <= ext)) | ((np.abs(dy) <= t) & (np.abs(dx) <= ext))
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= ext
    elif shape == "star":
        m = _poly_mask(_star_verts(cx, cy, ext), h, w)
    else:  # bar
        t = 0.22 * ext
        if rng.integers(2):
            dx, dy = dy, dx  # vertical bar
        m = (np.abs(dx) <= ext) & (np.abs(dy) <= t)
    return m.astype(np.uint8)


def tight_box(mask: np.ndarray) -> tuple:
    """Smallest (x0,y0,x1,y1) half-open box covering the nonzero pixels."""
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    if ys.size == 0:
        raise ValueError("tight_box of an empty mask")
    return (int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1)


# ---------------------------------------------------------------------------
# generators


def gen_background(seed, count, h=64, w=64):
    """Background-only textures, one of the four families per image in
    rotation. Deterministic in (seed, count, h, w)."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = spawn_rng(seed, "gen-background")
    out = []
    for i in range(count):
        family = TEXTURE_FAMILIES[i % len(TEXTURE_FAMILIES)]
        px = _quantize(texture(family, rng, h, w))
        out.append(ImageSample(px, label=None, is_background=True,
                               image_id=f"bg_{i:05d}"))
    return out


def gen_labeled(seed, count, n_classes=8, h=64, w=64):
    """Shape-on-texture samples with exact masks and tight boxes. Class id is
    shape index mod n_classes; classes are drawn uniformly."""
    if not (2 <= n_classes <= 16):
        raise ValueError(f"n_classes must lie in [2, 16], got {n_classes}")
    rng = spawn_rng(seed, "gen-labeled")
    out = []
    for i in range(count):
        family = TEXTURE_FAMILIES[int(rng.integers(len(TEXTURE_FAMILIES)))]
        bg = np.clip(texture(family, rng, h, w), 0.0, 1.0)
        if n_classes <= len(SHAPE_NAMES):
            # draw the class first so the histogram is uniform even when
            # n_classes does not divide the shape count
            label = int(rng.integers(n_classes))
            candidates = [s for s in range(len(SHAPE_NAMES)) if s % n_classes == label]
            shape_idx = candidates[int(rng.integers(len(candidates)))]
        else:
            shape_idx = int(rng.integers(len(SHAPE_NAMES)))
            label = shape_idx % n_classes
        mask = None
        for _ in range(1000):
            target = rng.uniform(_TARGET_LO, _TARGET_HI) * h * w
            m = _raster_shape(SHAPE_NAMES[shape_idx], rng, h, w, target)
            if m is None:
                continue
            frac = m.sum() / (h * w)
            if AREA_LO <= frac <= AREA_HI:
                mask = m
                break
        if mask is None:
            raise DatasetError(f"could not place shape '{SHAPE_NAMES[shape_idx]}' in {h}x{w}")
        sel = mask.astype(bool)
        local_mean = bg[:, sel].mean(axis=1)
        for _ in range(1000):
            color = rng.uniform(0.0, 1.0, 3)
            if np.linalg.norm(color - local_mean) >= MIN_COLOR_DIST:
                break
        else:
            raise DatasetError("could not draw a fill color far enough from the background")
        px = bg.copy()
        px[:, sel] = color[:, None]
        px = _quantize(px)
        out.append(ImageSample(px, label=label, is_background=False,
                               gt_box=tight_box(mask), gt_mask=mask,
                               image_id=f"img_{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# on-disk layout


@dataclass
class DatasetManifest:
    root: str
    split: str
    records: list            # dicts {file,label,background,box}
    seed: Optional[int] = None
    class_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def load(self, i) -> ImageSample:
        rec = self.records[i]
        path = os.path.join(self.root, rec["file"])
        pixels = pnm.read_ppm(path)
        n_classes = self.meta.get("n_classes")
        label = rec["label"]
        if label is not None and n_classes is not None and not (0 <= label < n_classes):
            raise DatasetError(f"{path}: label {label} out of range [0, {n_classes})")
        mask = None
        mask_path = os.path.splitext(path)[0] + ".mask.pgm"
        if os.path.exists(mask_path):
            mask = (pnm.read_pgm(mask_path) > 127).astype(np.uint8)
        box = tuple(rec["box"]) if rec.get("box") else None
        return ImageSample(pixels, label=label, is_background=rec["background"],
                           gt_box=box, gt_mask=mask,
                           image_id=os.path.splitext(rec["file"])[0].split(os.sep)[-1])

    def samples(self):
        for i in range(len(self.records)):
            yield self.load(i)

    def load_all(self):
        return [self.load(i) for i in range(len(self.records))]


def save_split(samples, root, split):
    """Writes root/split/*.ppm (+ .mask.pgm for labeled samples) and
    root/split.jsonl; returns the manifest path."""
    split_dir = os.path.join(root, split)
    os.makedirs(split_dir, exist_ok=True)
    manifest_path = os.path.join(root, f"{split}.jsonl")
    with open(manifest_path, "w") as mf:
        for i, s in enumerate(samples):
            stem = s.image_id or f"{split}_{i:05d}"
            rel = os.path.join(split, f"{stem}.ppm")
            pnm.write_ppm(os.path.join(root, rel), s.pixels)
            if s.gt_mask is not None:
                pnm.write_pgm(os.path.join(split_dir, f"{stem}.mask.pgm"),
                              (s.gt_mask * 255).astype(np.uint8))
            rec = {"file": rel, "label": s.label, "background": s.is_background,
                   "box": list(s.gt_box) if s.gt_box else None}
            mf.write(json.dumps(rec) + "\n")
    return manifest_path


def load_dataset(manifest_path) -> DatasetManifest:
    """Parse a split manifest; existence of every referenced file is checked
    here, pixel decoding is lazy."""
    if not os.path.exists(manifest_path):
        raise DatasetError(f"manifest not found: {manifest_path}")
    root = os.path.dirname(os.path.abspath(manifest_path))
    split = os.path.splitext(os.path.basename(manifest_path))[0]
    records = []
    with open(manifest_path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{manifest_path}:{ln}: bad JSON record: {e}") from e
            records.append(rec)
    meta = {}
    meta_path = os.path.join(root, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
    for rec in records:
        path = os.path.join(root, rec["file"])
        if not os.path.exists(path):
            raise DatasetError(f"referenced image missing: {path}")
        n_classes = meta.get("n_classes")
        if rec["label"] is not None and n_classes is not None and not (0 <= rec["label"] < n_classes):
            raise DatasetError(f"{path}: label {rec['label']} out of range [0, {n_classes})")
    return DatasetManifest(root=root, split=split, records=records,
                           seed=meta.get("seed"),
                           class_names=meta.get("class_names", []), meta=meta)


def channel_stats(samples) -> tuple:
    """Per-channel mean/std over a list of samples (the train split)."""
    acc = np.zeros(3, dtype=np.float64)
    acc2 = np.zeros(3, dtype=np.float64)
    n = 0
    for s in samples:
        acc += s.pixels.reshape(3, -1).sum(axis=1)
        acc2 += (s.pixels.astype(np.float64) ** 2).reshape(3, -1).sum(axis=1)
        n += s.pixels.shape[1] * s.pixels.shape[2]
    mean = acc / n
    var = acc2 / n - mean ** 2
    return mean, np.sqrt(np.maximum(var, 1e-12))


def generate_dataset(out_dir, seed, n_classes=8, n_train=2000, n_test=400,
                     n_background=60, h=64, w=64):
    """Full dataset: train/test/background splits plus meta.json. Returns the
    meta dict."""
    train = gen_labeled(seed, n_train, n_classes, h, w)
    test = gen_labeled(seed + 1, n_test, n_classes, h, w)
    background = gen_background(seed, n_background, h, w)
    os.makedirs(out_dir, exist_ok=True)
    save_split(train, out_dir, "train")
    save_split(test, out_dir, "test")
    save_split(background, out_dir, "background")
    mean, std = channel_stats(train)
    meta = {
        "seed": seed,
        "n_classes": n_classes,
        "class_names": list(SHAPE_NAMES[:n_classes]) if n_classes <= len(SHAPE_NAMES)
                       else [f"class_{i}" for i in range(n_classes)],
        "height": h,
        "width": w,
        "counts": {"train": n_train, "test": n_test, "background": n_background},
        "background_ratio": n_background / max(n_train, 1),
        "channel_mean": mean.tolist(),
        "channel_std": std.tolist(),
        "texture_families": list(TEXTURE_FAMILIES),
        "shape_names": list(SHAPE_NAMES),
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
    return meta
