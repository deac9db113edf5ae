"""The three training stages plus the augmentation pipeline.

Stages:
1. pretrain_backbone -- supervised shape classification to warm up the conv
   stack (the stand-in for generic pretrained features).
2. train_bc -- freeze the backbone, train the single-logit head on a 50/50
   background/target sampling mix. Runs on raw resize-only pixels: the same
   representation the mask pipeline later differentiates against.
3. train_bcct -- joint training of the CT classifier with the pixel mask
   supervision derived from BC input gradients. Masks default to clean
   (un-augmented) images and are replayed through each sample's geometric
   transform so mask and view stay aligned.

Single-threaded and bit-deterministic for a fixed (config, seed, dataset).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .config import MOMENTUM, TrainConfig
from .nets import (BCNet, Backbone, CTNet, bce_loss, cls_loss, mask_loss,
                   params_to_arrays, total_loss)
from .saliency import mask_for_batch
from .seeding import spawn_rng
from .tensor import Graph, Tensor, backward, dense, gap, resize_bilinear, sigmoid

HUE_ANGLE_SCALE = 0.25  # radians of channel-mix rotation per unit of jitter draw


@dataclass
class TransformLog:
    """Everything needed to replay one sample's augmentation exactly."""
    crop: tuple            # (x0, y0, x1, y1) on the source image
    flip_h: bool
    flip_v: bool
    brightness: float = 1.0
    saturation: float = 1.0
    hue: float = 1.0


@dataclass
class AugmentedBatch:
    images: np.ndarray     # (N,3,H,W) normalized, network-ready
    logs: list


def lr_at(epoch: int, base: float, factor: float, period: int) -> float:
    """Step schedule: base * factor ** floor(epoch / period)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base * factor ** (epoch // period)


def apply_geometry(arr: np.ndarray, log: TransformLog, out_hw, binarize=False):
    """Replay the geometric part (crop -> resize -> flips) of a transform on
    any (...,H,W) array. With binarize, re-threshold at 0.5 afterwards (for
    {0,1} masks)."""
    x0, y0, x1, y1 = log.crop
    out = arr[..., y0:y1, x0:x1]
    out = resize_bilinear(out.astype(np.float32, copy=False), out_hw[0], out_hw[1])
    if log.flip_h:
        out = out[..., ::-1]
    if log.flip_v:
        out = out[..., ::-1, :]
    out = np.ascontiguousarray(out)
    if binarize:
        out = (out >= 0.5).astype(np.uint8)
    return out


def _hue_rotation(angle: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis by `angle` radians."""
    u = np.full(3, 1.0 / math.sqrt(3.0))
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return (math.cos(angle) * np.eye(3) + math.sin(angle) * k
            + (1 - math.cos(angle)) * np.outer(u, u))


def _apply_color(px: np.ndarray, log: TransformLog) -> np.ndarray:
    # skip no-op stages so a unit transform is bit-identical to no transform
    out = px
    if log.brightness != 1.0:
        out = out * log.brightness
    if log.saturation != 1.0:
        gray = out.mean(axis=0, keepdims=True)
        out = gray + log.saturation * (out - gray)
    if log.hue != 1.0:
        rot = _hue_rotation(HUE_ANGLE_SCALE * (log.hue - 1.0)).astype(out.dtype)
        out = np.einsum("ij,jhw->ihw", rot, out)
    if out is px:
        return px
    return np.clip(out, 0.0, 1.0)


def _draw_crop(rng, h, w):
    frac = rng.uniform(0.6, 1.0)
    aspect = rng.uniform(3.0 / 4.0, 4.0 / 3.0)
    area = frac * h * w
    cw = min(w, max(1, int(round(math.sqrt(area * aspect)))))
    ch = min(h, max(1, int(round(math.sqrt(area / aspect)))))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return (x0, y0, x0 + cw, y0 + ch)


def augment_sample(pixels: np.ndarray, rng, cfg: TrainConfig, stats, out_hw):
    """One training view: random crop/resize, flips, color jitter, then
    normalization. Returns (normalized, raw_augmented, log); the raw view is
    kept for mask computation on augmented inputs."""
    h, w = pixels.shape[-2:]
    crop = _draw_crop(rng, h, w) if cfg.aug_crop else (0, 0, w, h)
    flip_h = bool(rng.integers(2)) if cfg.aug_flip else False
    flip_v = bool(rng.integers(2)) if cfg.aug_flip else False
    if cfg.aug_color:
        brightness = float(rng.uniform(0.6, 1.4))
        saturation = float(rng.uniform(0.6, 1.4))
        hue = float(rng.uniform(0.6, 1.4))
    else:
        brightness = saturation = hue = 1.0
    log = TransformLog(crop, flip_h, flip_v, brightness, saturation, hue)
    raw = apply_geometry(pixels, log, out_hw)
    raw = _apply_color(raw, log)
    return normalize(raw, stats, cfg.dtype), raw, log


def normalize(px: np.ndarray, stats, dtype=np.float32) -> np.ndarray:
    mean, std = stats
    out = (px - np.asarray(mean, dtype=np.float64)[:, None, None]) \
        / np.asarray(std, dtype=np.float64)[:, None, None]
    return out.astype(dtype)


def eval_view(pixels: np.ndarray, stats, out_hw, dtype=np.float32) -> np.ndarray:
    """Evaluation path: resize + normalize only."""
    h, w = pixels.shape[-2:]
    px = pixels if (h, w) == tuple(out_hw) else \
        resize_bilinear(pixels.astype(np.float32), out_hw[0], out_hw[1])
    return normalize(px, stats, dtype)


class SGD:
    """Plain SGD with momentum over named parameter tensors."""

    def __init__(self, params: dict, momentum: float = MOMENTUM):
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr_for_name):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= p.dtype.type(lr_for_name(name)) * v


def _lr_map(cfg, epoch):
    lr_b = lr_at(epoch, cfg.lr_backbone, cfg.lr_decay_factor, cfg.lr_decay_period)
    lr_h = lr_at(epoch, cfg.lr_head, cfg.lr_decay_factor, cfg.lr_decay_period)
    return (lambda name: lr_b if name.startswith("backbone.") else lr_h), lr_b, lr_h


def _batches(n, size):
    for i in range(0, n, size):
        yield range(i, min(i + size, n))


def _class_accuracy(net_forward, samples, stats, batch_size, dtype):
    correct = 0
    n = len(samples)
    hw = samples[0].pixels.shape[-2:]
    for idx in _batches(n, batch_size):
        xs = np.stack([eval_view(samples[i].pixels, stats, hw, dtype) for i in idx])
        logits = net_forward(Tensor(xs))
        pred = logits.argmax(axis=1)
        correct += sum(int(pred[j]) == samples[i].label for j, i in enumerate(idx))
    return correct / n


# ---------------------------------------------------------------------------
# stage 1: backbone pretraining


def pretrain_backbone(cfg: TrainConfig, train_set, test_set, stats, n_classes):
    """Train backbone + a throwaway gap/dense classifier; returns
    (backbone arrays, report)."""
    if any(s.label is None for s in train_set):
        raise ValueError("pretraining requires a labeled dataset (found samples without labels)")
    dtype = cfg.dtype
    rng_init = spawn_rng(cfg.seed, "pretrain-init")
    rng_train = spawn_rng(cfg.seed, "pretrain-train")
    backbone = Backbone.init(rng_init, dtype=dtype)
    d = backbone.out_channels
    fc_w = Tensor((rng_init.standard_normal((d, n_classes)) * math.sqrt(2.0 / d)).astype(dtype),
                  requires_grad=True)
    fc_b = Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True)
    params = dict(backbone.parameters())
    params["pretrain.fc.weight"] = fc_w
    params["pretrain.fc.bias"] = fc_b
    opt = SGD(params)
    hw = train_set[0].pixels.shape[-2:]
    labels = np.array([s.label for s in train_set])
    n = len(train_set)
    history = []
    for epoch in range(cfg.pretrain_epochs):
        lr_fn, lr_b, lr_h = _lr_map(cfg, epoch)
        order = rng_train.permutation(n)
        loss_sum, batches = 0.0, 0
        for idx in _batches(n, cfg.batch_size):
            sel = order[list(idx)]
            views = [augment_sample(train_set[i].pixels, rng_train, cfg, stats, hw)[0]
                     for i in sel]
            x = Tensor(np.stack(views))
            g = Graph()
            feats = backbone.forward(g, x)
            logits = dense(g, gap(g, feats), fc_w, fc_b)
            loss = cls_loss(g, logits, labels[sel])
            opt.zero_grad()
            backward(g, loss)
            opt.step(lr_fn)
            loss_sum += float(loss.data)
            batches += 1
        history.append({"epoch": epoch, "loss": loss_sum / batches,
                        "lr_backbone": lr_b, "lr_head": lr_h})

    def fwd(x):
        feats = backbone.forward(None, x)
        return dense(None, gap(None, feats), fc_w, fc_b).data

    report = {
        "train_acc": _class_accuracy(fwd, train_set, stats, cfg.batch_size, dtype),
        "test_acc": _class_accuracy(fwd, test_set, stats, cfg.batch_size, dtype),
        "history": history,
    }
    return params_to_arrays(backbone.parameters()), report


# ---------------------------------------------------------------------------
# stage 2: BC head training


def _bc_features(backbone, samples, stats, batch_size, dtype):
    """gap(backbone(x)) on resize+normalize views, the same representation
    the backbone was pretrained on; the backbone is frozen so these are
    constants for head training."""
    feats = []
    hw = samples[0].pixels.shape[-2:]
    for idx in _batches(len(samples), batch_size):
        xs = np.stack([eval_view(samples[i].pixels, stats, hw, dtype) for i in idx])
        f = gap(None, backbone.forward(None, Tensor(xs)))
        feats.append(f.data)
    return np.concatenate(feats, axis=0)


def split_background_pool(background_set, holdout_frac=0.2):
    """Deterministic tail split of the background pool for held-out accuracy."""
    n_hold = max(1, int(round(holdout_frac * len(background_set))))
    n_hold = min(n_hold, len(background_set) - 1) if len(background_set) > 1 else 0
    if n_hold == 0:
        return background_set, []
    return background_set[:-n_hold], background_set[-n_hold:]


def train_bc(cfg: TrainConfig, train_set, background_set, backbone_arrays,
             stats, test_set=None):
    """Freeze the backbone, train the binary head on 50/50 draws; returns
    (bc arrays, report). Held-out accuracy mixes the test split (targets)
    with a tail slice of the background pool."""
    if not background_set:
        raise ValueError("background set is empty; BC training needs background images")
    dtype = cfg.dtype
    backbone = Backbone.from_arrays(backbone_arrays, frozen=True)
    rng_init = spawn_rng(cfg.seed, "bc-init")
    rng_train = spawn_rng(cfg.seed, "bc-train")
    net = BCNet.init(backbone, rng_init, dtype=dtype)

    bg_train, bg_hold = split_background_pool(background_set)
    target_feats = _bc_features(backbone, train_set, stats, cfg.batch_size, dtype)
    bg_feats = _bc_features(backbone, bg_train, stats, cfg.batch_size, dtype)

    opt = SGD(net.head_parameters())
    steps_per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))
    history = []
    for epoch in range(cfg.bc_epochs):
        lr_fn, _, lr_h = _lr_map(cfg, epoch)
        loss_sum = 0.0
        for _ in range(steps_per_epoch):
            coins = rng_train.integers(0, 2, cfg.batch_size)     # 1 = target
            t_idx = rng_train.integers(0, len(target_feats), cfg.batch_size)
            b_idx = rng_train.integers(0, len(bg_feats), cfg.batch_size)
            x = np.where(coins[:, None] == 1, target_feats[t_idx], bg_feats[b_idx])
            g = Graph()
            logit = dense(g, Tensor(x), net.fc_w, net.fc_b)
            prob = sigmoid(g, logit)
            loss = bce_loss(g, prob, coins.astype(np.float64))
            opt.zero_grad()
            backward(g, loss)
            opt.step(lambda name: lr_h)
            loss_sum += float(loss.data)
        history.append({"epoch": epoch, "loss": loss_sum / steps_per_epoch, "lr_head": lr_h})

    report = {"history": history, "n_background_train": len(bg_train),
              "n_background_holdout": len(bg_hold)}
    if test_set is not None:
        hold_feats = []
        hold_labels = []
        if test_set:
            hold_feats.append(_bc_features(backbone, test_set, stats, cfg.batch_size, dtype))
            hold_labels.append(np.ones(len(test_set)))
        if bg_hold:
            hold_feats.append(_bc_features(backbone, bg_hold, stats, cfg.batch_size, dtype))
            hold_labels.append(np.zeros(len(bg_hold)))
        x = np.concatenate(hold_feats)
        y = np.concatenate(hold_labels)
        logits = (x @ net.fc_w.data + net.fc_b.data)[:, 0]
        report["holdout_acc"] = float(((logits > 0) == (y == 1)).mean())

    arrays = params_to_arrays(backbone.parameters())
    arrays["bc.fc.weight"] = net.fc_w.data
    arrays["bc.fc.bias"] = net.fc_b.data
    return arrays, report


# ---------------------------------------------------------------------------
# stage 3: joint BC-CT training


def _clean_masks(bc_net, samples, cfg, stats):
    """Masks from clean (resize+normalize only, no augmentation) views; BC is
    fixed during the joint phase, so these are computed once and replayed
    per epoch."""
    masks = []
    hw = samples[0].pixels.shape[-2:]
    for idx in _batches(len(samples), cfg.batch_size):
        xs = np.stack([eval_view(samples[i].pixels, stats, hw, cfg.dtype) for i in idx])
        batch_masks = mask_for_batch(bc_net, xs, cfg.delta,
                                     reduce=cfg.grad_reduce,
                                     blur_radius=cfg.grad_blur_radius,
                                     normalize=cfg.grad_normalize)
        masks.extend(m.values for m in batch_masks)
    return masks


def train_bcct(cfg: TrainConfig, train_set, background_set, backbone_arrays,
               bc_arrays, n_classes, stats):
    """Joint stage; returns (ct arrays, per-epoch log rows).

    Per batch: fetch the per-image supervision mask (precomputed on clean
    pixels unless masks_on_augmented), replay each sample's geometric
    transform onto its mask, forward the CT net on the augmented normalized
    view, and descend cls + lambda_mask * mask. With lambda_mask == 0 the
    mask machinery is skipped entirely, which is bit-identical to a build
    without the mask branch loss.
    """
    dtype = cfg.dtype
    rng_init = spawn_rng(cfg.seed, "ct-init")
    rng_train = spawn_rng(cfg.seed, "bcct-train")
    ct_backbone = Backbone.from_arrays(backbone_arrays, frozen=False)
    ct = CTNet.init(ct_backbone, n_classes, rng_init, dtype=dtype)

    use_masks = cfg.lambda_mask > 0
    bc_net = None
    if use_masks:
        bc_net = BCNet.from_arrays(bc_arrays)
        if cfg.bc_warmup_epochs > 0:
            warm = TrainConfig(**{**cfg.to_dict(), "bc_epochs": cfg.bc_warmup_epochs,
                                  "seed": cfg.seed + 104729})
            warm_arrays, _ = train_bc(warm, train_set, background_set,
                                      backbone_arrays, stats)
            bc_net = BCNet.from_arrays(warm_arrays)

    clean_masks = None
    if use_masks and not cfg.masks_on_augmented:
        clean_masks = _clean_masks(bc_net, train_set, cfg, stats)

    opt = SGD(ct.parameters())
    labels = np.array([s.label for s in train_set])
    hw = train_set[0].pixels.shape[-2:]
    n = len(train_set)
    log_rows = []
    for epoch in range(cfg.joint_epochs):
        t_epoch = time.perf_counter()
        lr_fn, lr_b, lr_h = _lr_map(cfg, epoch)
        order = rng_train.permutation(n)
        cls_sum = mask_sum = 0.0
        batches = 0
        for idx in _batches(n, cfg.batch_size):
            sel = order[list(idx)]
            views, logs = [], []
            for i in sel:
                v, _, lg = augment_sample(train_set[i].pixels, rng_train, cfg, stats, hw)
                views.append(v)
                logs.append(lg)
            x = Tensor(np.stack(views))

            batch_masks = None
            if use_masks:
                if cfg.masks_on_augmented:
                    m = mask_for_batch(bc_net, x.data, cfg.delta,
                                       reduce=cfg.grad_reduce,
                                       blur_radius=cfg.grad_blur_radius,
                                       normalize=cfg.grad_normalize)
                    batch_masks = np.stack([mm.values for mm in m])
                else:
                    replayed = [apply_geometry(clean_masks[i], lg, hw, binarize=True)
                                for i, lg in zip(sel, logs)]
                    batch_masks = np.stack(replayed)
                if batch_masks.shape[1:] != tuple(hw):
                    raise RuntimeError(
                        f"mask replay produced shape {batch_masks.shape[1:]}, "
                        f"image is {tuple(hw)}; refusing to resize silently")

            g = Graph()
            logits, score, cam = ct.forward(g, x)
            c_loss = cls_loss(g, logits, labels[sel])
            m_loss = mask_loss(g, cam, batch_masks, cfg.full_bce) if use_masks else None
            loss = total_loss(g, c_loss, m_loss, cfg.lambda_mask)
            opt.zero_grad()
            backward(g, loss)
            opt.step(lr_fn)
            cls_sum += float(c_loss.data)
            mask_sum += float(m_loss.data) if m_loss is not None else 0.0
            batches += 1
        cls_mean = cls_sum / batches
        mask_mean = mask_sum / batches
        log_rows.append({
            "epoch": epoch,
            "lr_backbone": lr_b,
            "lr_head": lr_h,
            "cls_loss": cls_mean,
            "mask_loss": mask_mean,
            "total_loss": cls_mean + cfg.lambda_mask * mask_mean,
            "wall_ms": int((time.perf_counter() - t_epoch) * 1000),
        })
    return params_to_arrays(ct.parameters()), log_rows
