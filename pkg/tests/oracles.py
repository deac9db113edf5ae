"""Independent reference implementations used by the tests.

These deliberately avoid the package's own code paths: finite differences for
gradients, per-pixel python loops for convolution/thresholding, and
scipy.ndimage for connected components.
"""

import numpy as np


def finite_diff(f, x, step=1e-5):
    """Central finite differences of scalar-valued f() w.r.t. array x,
    perturbing x in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_err(analytic, numeric):
    denom = max(1.0, float(np.abs(numeric).max()))
    return float(np.abs(np.asarray(analytic) - np.asarray(numeric)).max()) / denom


def conv2d_direct(x, w, b, stride=1, pad=0):
    """Quadruple-loop direct summation convolution."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo), dtype=np.float64)
    for ni in range(n):
        for ki in range(k):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, ki, i, j] = float((patch * w[ki]).sum()) + b[ki]
    return out


def bilinear_direct(inp, out_h, out_w):
    """Per-output-pixel bilinear sampling with half-pixel centers and edge
    clamping; inp is (h,w)."""
    h, w = inp.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for y in range(out_h):
        sy = min(max((y + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for x in range(out_w):
            sx = min(max((x + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[y, x] = ((1 - fy) * (1 - fx) * inp[y0, x0]
                         + (1 - fy) * fx * inp[y0, x1]
                         + fy * (1 - fx) * inp[y1, x0]
                         + fy * fx * inp[y1, x1])
    return out


def largest_component_scipy(mask):
    """Largest 4-connected component via scipy.ndimage (independent route).
    Ties broken by earliest row-major pixel, matching the contract."""
    from scipy import ndimage
    labels, n = ndimage.label(mask, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    if n == 0:
        return np.zeros_like(mask)
    sizes = ndimage.sum_labels(np.ones_like(mask), labels, index=range(1, n + 1))
    best = np.max(sizes)
    candidates = [i + 1 for i, s in enumerate(sizes) if s == best]
    if len(candidates) == 1:
        pick = candidates[0]
    else:
        first = {}
        flat = labels.reshape(-1)
        for pos, lab in enumerate(flat):
            if lab in candidates and lab not in first:
                first[lab] = pos
        pick = min(candidates, key=lambda lab: first[lab])
    return (labels == pick).astype(mask.dtype)


def iou_rasterized(box_a, box_b, h, w):
    """IoU computed over rasterized pixel sets rather than area arithmetic."""
    grid_a = np.zeros((h, w), dtype=bool)
    grid_b = np.zeros((h, w), dtype=bool)
    grid_a[box_a[1]:box_a[3], box_a[0]:box_a[2]] = True
    grid_b[box_b[1]:box_b[3], box_b[0]:box_b[2]] = True
    union = (grid_a | grid_b).sum()
    return (grid_a & grid_b).sum() / union if union else 0.0
