"""Localization evaluation: CAM -> box extraction, IoU, top-1/top-5 error,
mask validity (BC*), and the threshold sweep."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nets import BCNet, CTNet
from .saliency import BinaryMask, largest_component, mask_for_batch, threshold_mask, GradientMap
from .synthdata import tight_box
from .tensor import Tensor, resize_bilinear


@dataclass(frozen=True)
class Box:
    """Pixel box, inclusive-exclusive: x in [x0,x1), y in [y0,y1)."""
    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, width=None, height=None):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"box {self} extends past the origin")
        if width is not None and self.x1 > width:
            raise ValueError(f"box {self} wider than image width {width}")
        if height is not None and self.y1 > height:
            raise ValueError(f"box {self} taller than image height {height}")
        return self

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class LocalizationRecord:
    image_id: object
    true_label: int
    top5: list                       # predicted labels, descending score
    boxes: list                      # Box per top5 candidate, same order
    ious: list                       # IoU vs gt for each candidate box
    top1_correct: bool
    top5_correct: bool
    gt_box: Optional[tuple] = None
    extras: dict = field(default_factory=dict)


def iou(a: Box, b: Box) -> float:
    ix0 = max(a.x0, b.x0)
    iy0 = max(a.y0, b.y0)
    ix1 = min(a.x1, b.x1)
    iy1 = min(a.y1, b.y1)
    inter = max(0, ix1 - ix0) * max(0, iy1 - iy0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def cam_for_class(score_map: np.ndarray, c: int, out_h: int, out_w: int) -> np.ndarray:
    """Channel c of a (n,h,w) score map, upsampled to out_h x out_w and
    min-max normalized to [0,1]. A constant channel yields all zeros plus a
    warning (nothing to localize)."""
    n = score_map.shape[0]
    if not (0 <= c < n):
        raise ValueError(f"class {c} out of range [0, {n})")
    chan = np.asarray(score_map[c], dtype=np.float64)
    up = resize_bilinear(chan[None], out_h, out_w)[0]
    mx, mn = up.max(), up.min()
    if mx == mn:
        warnings.warn("constant score channel; normalized CAM is all zeros", RuntimeWarning)
        return np.zeros_like(up)
    return (up - mn) / (mx - mn)


def box_from_map(cam: np.ndarray, tau: float) -> Box:
    """Binarize at tau * max, keep the largest 4-connected component, return
    its tight box. An all-zero map falls back to the full-image box."""
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    arr = np.asarray(cam, dtype=np.float64)
    h, w = arr.shape
    if arr.max() == 0:
        warnings.warn("all-zero map; falling back to the full-image box", RuntimeWarning)
        return Box(0, 0, w, h)
    mask = largest_component(threshold_mask(GradientMap(arr), tau))
    return Box(*tight_box(mask.values))


def localization_error(records, k: int) -> float:
    """Percentage of records that fail the rank-k criterion (correct label
    within top-k AND that candidate's box IoU above 0.5)."""
    if not records:
        raise ValueError("localization_error over an empty split")
    if k == 1:
        correct = sum(r.top1_correct for r in records)
    elif k == 5:
        correct = sum(r.top5_correct for r in records)
    else:
        raise ValueError(f"k must be 1 or 5, got {k}")
    return 100.0 * (1.0 - correct / len(records))


def mask_validity(mask: BinaryMask, gt_box: Box) -> bool:
    """A mask is valid when its tight box overlaps gt (IoU > 0.5) or fully
    contains it. Empty masks are invalid, not an error."""
    if not mask.component_selected:
        raise ValueError("mask_validity expects a component-selected mask")
    if mask.values.sum() == 0:
        return False
    mb = Box(*tight_box(mask.values))
    if iou(mb, gt_box) > 0.5:
        return True
    return (mb.x0 <= gt_box.x0 and mb.y0 <= gt_box.y0
            and mb.x1 >= gt_box.x1 and mb.y1 >= gt_box.y1)


def _iou_ok(value: float, geq: bool) -> bool:
    return value >= 0.5 if geq else value > 0.5


def evaluate_records(ct_net: CTNet, samples, stats, taus, batch_size=32,
                     iou_geq=False, dtype=np.float32):
    """Forward every sample once, then derive per-tau records. Returns
    {tau: [LocalizationRecord]}; iteration order is sample order."""
    from .trainer import eval_view
    if not samples:
        raise ValueError("evaluation over an empty split")
    if not taus:
        raise ValueError("no thresholds given")
    hw = samples[0].pixels.shape[-2:]
    k_top = min(5, ct_net.n_classes)
    per_tau = {t: [] for t in taus}
    n = len(samples)
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        xs = np.stack([eval_view(samples[i].pixels, stats, hw, dtype) for i in idx])
        logits, score, _ = ct_net.forward(None, Tensor(xs))
        order = np.argsort(-logits.data, axis=1, kind="stable")
        for j, i in enumerate(idx):
            s = samples[i]
            gt = Box(*s.gt_box).validate(hw[1], hw[0])
            top5 = [int(c) for c in order[j, :k_top]]
            cams = {c: cam_for_class(score.data[j], c, hw[0], hw[1]) for c in top5}
            for tau in taus:
                boxes, ious = [], []
                for c in top5:
                    bx = box_from_map(cams[c], tau)
                    boxes.append(bx)
                    ious.append(iou(bx, gt))
                top1 = top5[0] == s.label and _iou_ok(ious[0], iou_geq)
                topk = any(c == s.label and _iou_ok(v, iou_geq)
                           for c, v in zip(top5, ious))
                per_tau[tau].append(LocalizationRecord(
                    image_id=s.image_id, true_label=s.label, top5=top5,
                    boxes=boxes, ious=ious, top1_correct=bool(top1),
                    top5_correct=bool(topk), gt_box=gt.as_tuple()))
    return per_tau


def bc_star_error(bc_net: BCNet, samples, stats, delta: float, batch_size=32,
                  grad_reduce="max_abs", grad_blur_radius=0,
                  grad_normalize="smoothed_rank", dtype=np.float32) -> float:
    """Percentage of samples whose BC mask is not valid for the gt box.
    Masks come from the same clean resize+normalize views used in training."""
    from .trainer import eval_view
    if not samples:
        raise ValueError("BC* evaluation over an empty split")
    valid = 0
    n = len(samples)
    hw = samples[0].pixels.shape[-2:]
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        xs = np.stack([eval_view(samples[i].pixels, stats, hw, dtype) for i in idx])
        masks = mask_for_batch(bc_net, xs, delta, reduce=grad_reduce,
                               blur_radius=grad_blur_radius,
                               normalize=grad_normalize)
        for j, i in enumerate(idx):
            gt = Box(*samples[i].gt_box).validate(hw[1], hw[0])
            valid += int(mask_validity(masks[j], gt))
    return 100.0 * (1.0 - valid / n)


def evaluate(ct_arrays, samples, stats, tau, bc_arrays=None, batch_size=32,
             iou_geq=False, dtype=np.float32, delta_for_bc=None,
             grad_reduce="max_abs", grad_blur_radius=0,
             grad_normalize="smoothed_rank"):
    """Full evaluation pass; returns (records, metrics dict)."""
    ct_net = CTNet.from_arrays(ct_arrays)
    records = evaluate_records(ct_net, samples, stats, [tau], batch_size,
                               iou_geq, dtype)[tau]
    metrics = {
        "top1_err": localization_error(records, 1),
        "top5_err": localization_error(records, 5),
        "bcstar_err": None,
        "n": len(records),
        "tau": tau,
    }
    if bc_arrays is not None:
        bc_net = BCNet.from_arrays(bc_arrays)
        metrics["bcstar_err"] = bc_star_error(
            bc_net, samples, stats, tau if delta_for_bc is None else delta_for_bc,
            batch_size, grad_reduce=grad_reduce,
            grad_blur_radius=grad_blur_radius, grad_normalize=grad_normalize,
            dtype=dtype)
    return records, metrics


def sweep_threshold(ct_arrays, samples, stats, deltas, batch_size=32,
                    iou_geq=False, dtype=np.float32):
    """Evaluate localization error at each delta (used as the CAM threshold).
    Returns a list of {delta, top1_err, top5_err} rows."""
    if not deltas:
        raise ValueError("sweep needs at least one delta")
    ct_net = CTNet.from_arrays(ct_arrays)
    per_tau = evaluate_records(ct_net, samples, stats, list(deltas), batch_size,
                               iou_geq, dtype)
    rows = []
    for d in deltas:
        recs = per_tau[d]
        rows.append({"delta": d,
                     "top1_err": localization_error(recs, 1),
                     "top5_err": localization_error(recs, 5)})
    return rows


def sweep_table(rows) -> str:
    lines = [f"{'delta':>8} {'top1_err':>10} {'top5_err':>10}"]
    for r in rows:
        lines.append(f"{r['delta']:>8.2f} {r['top1_err']:>10.2f} {r['top5_err']:>10.2f}")
    return "\n".join(lines) + "\n"
