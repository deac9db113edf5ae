"""Fast invariant suite behind the `selftest` subcommand.

Each check re-derives its expected values through an independent route
(central finite differences, per-pixel scans, hand arithmetic) so reviewers
can validate the core machinery without a test harness.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nets import bce_loss, cls_loss, mask_loss, total_loss
from .saliency import BinaryMask, GradientMap, largest_component, threshold_mask


def finite_difference(f, x: np.ndarray, step=1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x."""
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


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(1.0, float(np.abs(numeric).max()))
    return float(np.abs(analytic - numeric).max()) / denom


def _scalarize(g, t):
    """Sum-to-scalar node so any op output can be a backward root."""
    out = T.Tensor(np.asarray(t.data.sum()))

    def bwd(go, need):
        return (np.broadcast_to(go, t.shape),) if need[0] else (None,)

    g.record("sum", (t,), out, bwd)
    return out


def grad_check(build, tensors, tol=1e-6, step=1e-5):
    """build(graph) -> output tensor; checks d(sum(output))/d(t) for every t
    against central differences. Returns the worst relative error."""
    g = T.Graph()
    out = _scalarize(g, build(g))
    for t in tensors:
        t.grad = None
    T.backward(g, out)
    worst = 0.0
    for t in tensors:
        num = finite_difference(lambda: float(build(None).data.sum()), t.data, step)
        worst = max(worst, rel_err(t.grad, num))
    return worst


def _op_grad_checks(rng, rounds=3):
    results = []

    def randt(*shape, scale=1.0):
        return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)

    worst = 0.0
    for _ in range(rounds):
        x = randt(2, 3, 6, 6)
        w = randt(4, 3, 3, 3, scale=0.5)
        b = randt(4, scale=0.1)
        worst = max(worst, grad_check(lambda g: T.conv2d(g, x, w, b, 1, 1), [x, w, b]))
    results.append(("conv2d gradient vs finite differences", worst < 1e-6, f"rel err {worst:.2e}"))

    worst = 0.0
    for _ in range(rounds):
        x = randt(1, 1, 4, 4)
        worst = max(worst, grad_check(lambda g: T.maxpool2d(g, x, 2, 2), [x]))
    results.append(("maxpool2d gradient vs finite differences", worst < 1e-6, f"rel err {worst:.2e}"))

    worst = 0.0
    for _ in range(rounds):
        x = randt(2, 4, 3, 3)
        worst = max(worst, grad_check(lambda g: T.gap(g, x), [x]))
    results.append(("gap gradient vs finite differences", worst < 1e-6, f"rel err {worst:.2e}"))

    worst = 0.0
    for _ in range(rounds):
        x = randt(3, 4)
        w = randt(4, 2)
        b = randt(2)
        worst = max(worst, grad_check(lambda g: T.dense(g, x, w, b), [x, w, b]))
    results.append(("dense gradient vs finite differences", worst < 1e-6, f"rel err {worst:.2e}"))

    worst = 0.0
    for _ in range(rounds):
        x = randt(3, 5)
        for op in (T.relu, T.sigmoid, T.softmax):
            worst = max(worst, grad_check(lambda g: op(g, x), [x]))
    results.append(("activation gradients vs finite differences", worst < 1e-6, f"rel err {worst:.2e}"))

    worst = 0.0
    for _ in range(rounds):
        x = randt(1, 2, 3, 4)
        worst = max(worst, grad_check(lambda g: T.bilinear_upsample(g, x, 7, 9), [x]))
    results.append(("bilinear_upsample gradient vs finite differences", worst < 1e-6, f"rel err {worst:.2e}"))
    return results


def _loss_checks(rng):
    results = []
    p = T.Tensor(np.asarray([[0.5]]))
    v = float(bce_loss(None, p, [[1.0]]).data)
    ok = abs(v - math.log(2.0)) < 1e-9
    results.append(("binary cross entropy at p=0.5 equals ln 2", ok, f"{v:.6f}"))

    logits = T.Tensor(np.zeros((1, 4)))
    v = float(cls_loss(None, logits, [2]).data)
    ok = abs(v - math.log(4.0)) < 1e-9
    results.append(("cross entropy of uniform logits equals ln n", ok, f"{v:.6f}"))

    cam = T.Tensor(np.asarray([[0.25, 0.9], [0.9, 0.9]]))
    m = np.asarray([[1, 0], [0, 0]])
    v = float(mask_loss(None, cam, m).data)
    ok = abs(v - math.log(4.0)) < 1e-9
    results.append(("mask loss single positive pixel equals -ln A", ok, f"{v:.6f}"))

    c = T.Tensor(np.asarray(0.5))
    mk = T.Tensor(np.asarray(0.25))
    v = float(total_loss(None, c, mk, 2.0).data)
    results.append(("total loss is cls + lambda * mask", abs(v - 1.0) < 1e-12, f"{v:.6f}"))

    # random-instance oracle comparison in double precision
    worst = 0.0
    for _ in range(20):
        z = rng.standard_normal((3, 5))
        y = rng.integers(0, 5, 3)
        ours = float(cls_loss(None, T.Tensor(z), y).data)
        ref = 0.0
        for i in range(3):
            e = np.exp(z[i] - z[i].max())
            ref += -math.log(e[y[i]] / e.sum())
        worst = max(worst, abs(ours - ref / 3))
    results.append(("cross entropy matches scalar oracle", worst < 1e-10, f"abs err {worst:.2e}"))
    return results


def _mask_checks(rng):
    results = []
    g = np.asarray([[0.2, 1.0], [0.79, 0.8]])
    m = threshold_mask(GradientMap(g), 0.8).values
    ok = np.array_equal(m, np.asarray([[0, 1], [0, 1]], dtype=np.uint8))
    results.append(("threshold mask boundary case (>= at 0.8*max)", ok, str(m.tolist())))

    worst_bad = 0
    for _ in range(10):
        gm = rng.random((32, 32))
        delta = float(rng.uniform(0.05, 1.0))
        ours = threshold_mask(GradientMap(gm), delta).values
        ref = np.zeros_like(ours)
        mx = gm.max()
        for y in range(32):
            for x in range(32):
                ref[y, x] = 1 if gm[y, x] >= delta * mx else 0
        worst_bad = max(worst_bad, int((ours != ref).sum()))
    results.append(("threshold mask matches per-pixel scan", worst_bad == 0, f"{worst_bad} mismatches"))

    grid = np.zeros((8, 8), dtype=np.uint8)
    grid[1:3, 1:3] = 1          # 4 pixels
    grid[5:8, 5:7] = 1          # 6 pixels
    out = largest_component(BinaryMask(grid)).values
    ok = out.sum() == 6 and out[6, 5] == 1 and out[1, 1] == 0
    results.append(("largest component keeps the bigger blob", ok, f"kept {int(out.sum())} px"))

    ok = True
    for _ in range(10):
        gm = rng.random((24, 24))
        d1, d2 = sorted(rng.uniform(0.1, 1.0, 2))
        m1 = threshold_mask(GradientMap(gm), float(d1)).values
        m2 = threshold_mask(GradientMap(gm), float(d2)).values
        if np.any(m2 > m1):
            ok = False
        if not np.array_equal(threshold_mask(GradientMap(3.7 * gm), float(d1)).values, m1):
            ok = False
    results.append(("delta monotonicity and scale invariance", ok, ""))
    return results


def _metric_checks():
    from .evalkit import Box, box_from_map, iou
    results = []
    a = Box(0, 0, 10, 10)
    b = Box(5, 0, 15, 10)
    v = iou(a, b)
    results.append(("IoU of half-overlapping boxes is 1/3", abs(v - 1 / 3) < 1e-12, f"{v:.6f}"))
    results.append(("IoU of identical boxes is 1", iou(a, a) == 1.0, ""))
    cam = np.zeros((8, 8))
    cam[3, 5] = 1.0
    bx = box_from_map(cam, 0.5)
    results.append(("box of a single hot pixel", bx.as_tuple() == (5, 3, 6, 4), str(bx.as_tuple())))
    return results


def run_selftest(seed=0):
    """Returns (all_ok, list of (name, ok, detail))."""
    rng = np.random.default_rng(seed)
    results = []
    results.extend(_op_grad_checks(rng))
    results.extend(_loss_checks(rng))
    results.extend(_mask_checks(rng))
    results.extend(_metric_checks())
    return all(ok for _, ok, _ in results), results
