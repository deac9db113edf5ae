"""From BC input gradients to binary supervision masks.

Pipeline per image: backpropagate the pre-sigmoid logit to the input pixels,
reduce the per-channel gradient to a single H x W magnitude surface, threshold
it at delta * max, and keep the largest 4-connected foreground component.
Masks come out as plain {0,1} arrays with no gradient linkage to the BC model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nets import BCNet
from .tensor import Graph, Tensor, backward

GRAD_REDUCES = ("max_abs", "mean_abs")
GRAD_NORMALIZES = ("smoothed_rank", "rank", "none")
SMOOTHED_RANK_RADIUS = 2  # box radius of the local average inside smoothed_rank


@dataclass
class GradientMap:
    """Nonnegative input-sensitivity surface, same H x W as the source image."""
    values: np.ndarray
    source_image_id: Optional[object] = None


@dataclass
class BinaryMask:
    """H x W array over {0,1}. component_selected means the foreground is a
    single 4-connected component (or empty)."""
    values: np.ndarray
    component_selected: bool = False
    warning: Optional[str] = None


def _reduce_channels(grad_chw: np.ndarray, reduce: str) -> np.ndarray:
    if reduce == "max_abs":
        return np.abs(grad_chw).max(axis=0)
    if reduce == "mean_abs":
        return np.abs(grad_chw).mean(axis=0)
    raise ValueError(f"unknown gradient reduce '{reduce}', expected one of {GRAD_REDUCES}")


def _box_blur(values: np.ndarray, radius: int) -> np.ndarray:
    """Separable box blur with edge clamping; used only for ablations."""
    if radius <= 0:
        return values
    k = 2 * radius + 1
    out = values.astype(np.float64)
    for axis in (0, 1):
        padded = np.concatenate([
            np.repeat(out.take([0], axis=axis), radius, axis=axis),
            out,
            np.repeat(out.take([-1], axis=axis), radius, axis=axis),
        ], axis=axis)
        csum = np.cumsum(padded, axis=axis)
        zero = np.zeros_like(csum.take([0], axis=axis))
        csum = np.concatenate([zero, csum], axis=axis)
        hi = csum.take(range(k, k + out.shape[axis]), axis=axis)
        lo = csum.take(range(0, out.shape[axis]), axis=axis)
        out = (hi - lo) / k
    return out.astype(values.dtype)


def _batch_input_gradients(net: BCNet, batch: Tensor) -> np.ndarray:
    """d(logit_i)/d(image_i) for every image of a (N,C,H,W) batch.

    Images are independent through the net, so backpropagating the sum of
    the per-image logits yields exactly the per-image input gradients in
    one pass. Parameter tensors are temporarily marked grad-free so their
    buffers stay untouched.
    """
    params = list(net.parameters().values())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        batch.requires_grad = True
        batch.grad = None
        g = Graph()
        logits = net.forward(g, batch)  # (N,1)
        total = Tensor(np.asarray(logits.data.sum(), dtype=logits.dtype))

        def bwd(go, need):
            if not need[0]:
                return (None,)
            return (np.broadcast_to(go, logits.shape),)

        g.record("logit_sum", (logits,), total, bwd)
        backward(g, total)
        return batch.grad
    finally:
        batch.requires_grad = False
        for p, f in zip(params, flags):
            p.requires_grad = f


def gradient_map(net: BCNet, image, reduce="max_abs", blur_radius=0,
                 image_id=None) -> GradientMap:
    """Input-gradient magnitude map for one (C,H,W) image."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"gradient_map expects a (C,H,W) image, got shape {arr.shape}")
    batch = Tensor(arr[None])
    grad = _batch_input_gradients(net, batch)[0]
    g = _reduce_channels(grad, reduce)
    g = _box_blur(g, blur_radius)
    return GradientMap(g, source_image_id=image_id)


def _rank_equalize(values: np.ndarray) -> np.ndarray:
    """Per-image histogram equalization: each pixel becomes its average rank
    in (0, 1]. Ties share their mean rank, so the result is deterministic,
    permutation-equivariant and invariant to rescaling of the input."""
    flat = values.reshape(-1)
    _, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    cum = np.concatenate(([0], np.cumsum(counts)))[:-1]
    avg = (cum + (counts + 1) / 2.0) / flat.size
    return avg[inv].reshape(values.shape).astype(np.float64)


def normalize_map(gm: GradientMap, mode: str = "smoothed_rank") -> GradientMap:
    """Per-image normalization applied before thresholding.

    Raw input-gradient magnitudes at this scale span decades between
    silhouette corners and the rest of the object outline, so a max-relative
    threshold keeps only a handful of pixels. "rank" equalizes the histogram;
    "smoothed_rank" (the default) additionally pools each pixel's rank over a
    small neighborhood and re-equalizes, which welds the outline into one
    component while leaving isolated background spikes below the threshold
    band. "none" passes raw magnitudes through.
    """
    if mode == "none":
        return gm
    if mode == "rank":
        return GradientMap(_rank_equalize(gm.values), gm.source_image_id)
    if mode == "smoothed_rank":
        pooled = _box_blur(_rank_equalize(gm.values), SMOOTHED_RANK_RADIUS)
        return GradientMap(_rank_equalize(pooled), gm.source_image_id)
    raise ValueError(f"unknown normalize mode '{mode}', expected one of {GRAD_NORMALIZES}")


def threshold_mask(gm: GradientMap, delta: float) -> BinaryMask:
    """M = 1 where G >= delta * max(G). An identically zero map yields an
    all-ones mask with an attached warning."""
    if not (0.0 < delta <= 1.0):
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    g = gm.values
    mx = g.max()
    warning = None
    if mx == 0:
        warning = "gradient map is identically zero; mask degenerates to all ones"
    m = (g >= delta * mx).astype(np.uint8)
    return BinaryMask(m, component_selected=False, warning=warning)


def largest_component(mask: BinaryMask) -> BinaryMask:
    """Keep only the largest 4-connected component of 1-pixels. Ties go to
    the component whose first pixel comes earliest in row-major order."""
    vals = mask.values
    h, w = vals.shape
    seen = np.zeros((h, w), dtype=bool)
    best_pixels = None
    best_size = 0
    for sy in range(h):
        row = vals[sy]
        for sx in range(w):
            if not row[sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            pixels = []
            while stack:
                y, x = stack.pop()
                pixels.append((y, x))
                if y > 0 and vals[y - 1, x] and not seen[y - 1, x]:
                    seen[y - 1, x] = True
                    stack.append((y - 1, x))
                if y + 1 < h and vals[y + 1, x] and not seen[y + 1, x]:
                    seen[y + 1, x] = True
                    stack.append((y + 1, x))
                if x > 0 and vals[y, x - 1] and not seen[y, x - 1]:
                    seen[y, x - 1] = True
                    stack.append((y, x - 1))
                if x + 1 < w and vals[y, x + 1] and not seen[y, x + 1]:
                    seen[y, x + 1] = True
                    stack.append((y, x + 1))
            if len(pixels) > best_size:
                best_size = len(pixels)
                best_pixels = pixels
    if best_pixels is None:
        return BinaryMask(np.zeros_like(vals), component_selected=True,
                          warning="mask has no foreground pixels")
    out = np.zeros_like(vals)
    ys, xs = zip(*best_pixels)
    out[list(ys), list(xs)] = 1
    return BinaryMask(out, component_selected=True, warning=mask.warning)


def mask_for_batch(net: BCNet, batch, delta: float, reduce="max_abs",
                   blur_radius=0, normalize="smoothed_rank"):
    """gradient_map -> normalize_map -> threshold_mask -> largest_component
    for every image of a (N,C,H,W) batch. Results are constants: nothing
    links back into the BC graph."""
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if arr.ndim != 4:
        raise ValueError(f"mask_for_batch expects a (N,C,H,W) batch, got shape {arr.shape}")
    grads = _batch_input_gradients(net, Tensor(arr))
    masks = []
    for i in range(arr.shape[0]):
        g = _box_blur(_reduce_channels(grads[i], reduce), blur_radius)
        gm = normalize_map(GradientMap(g, i), normalize)
        masks.append(largest_component(threshold_mask(gm, delta)))
    return masks


def gradient_map_to_pgm_bytes(gm: GradientMap) -> np.ndarray:
    """Min-max scale to [0,255] for PGM rendering."""
    g = gm.values.astype(np.float64)
    mx, mn = g.max(), g.min()
    if mx > mn:
        g = (g - mn) / (mx - mn)
    else:
        g = np.zeros_like(g)
    return np.round(g * 255.0).astype(np.uint8)


def mask_to_pgm_bytes(mask: BinaryMask) -> np.ndarray:
    return (mask.values.astype(np.uint8) * 255)
