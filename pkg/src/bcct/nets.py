"""Network definitions and losses.

Three parameter containers built on tensor ops:

* Backbone  -- 4-layer 3x3 conv stack (16/32/64/64 channels, pools after
               layers 2 and 4), the shared frozen-or-trainable feature
               extractor. Output spatial size is input/4.
* BCNet     -- backbone + GAP + dense to a single background-vs-target logit.
* CTNet     -- backbone + score head (two 3x3/64 convs + 1x1 to n_classes)
               whose GAP gives the class logits, plus a mask branch (two
               3x3/64 convs + 1x1 to one channel, sigmoid, bilinear upsample
               to input resolution).

The losses register their backward rules on the same tape the ops use.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (ShapeError, Tensor, bilinear_upsample, conv2d, dense,
                     gap, maxpool2d, relu, sigmoid)

BACKBONE_WIDTHS = (16, 32, 64, 64)
HEAD_WIDTH = 64

PROB_EPS = 1e-7       # clamp for binary cross entropy
CAM_EPS = 1e-6        # clamp for the pixel mask loss


def _kaiming(rng, shape, fan_in, dtype):
    w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Backbone:
    """Convolutional feature extractor; `frozen` pins its parameters."""

    def __init__(self, layers, frozen=False):
        self.layers = layers  # list of (weight, bias) Tensors
        self.frozen = frozen
        self._apply_frozen()

    def _apply_frozen(self):
        for w, b in self.layers:
            w.requires_grad = not self.frozen
            b.requires_grad = not self.frozen

    @classmethod
    def init(cls, rng, in_channels=3, dtype=np.float32, frozen=False):
        layers = []
        c_in = in_channels
        for c_out in BACKBONE_WIDTHS:
            w = _kaiming(rng, (c_out, c_in, 3, 3), c_in * 9, dtype)
            b = _zeros((c_out,), dtype)
            layers.append((w, b))
            c_in = c_out
        return cls(layers, frozen=frozen)

    @classmethod
    def from_arrays(cls, arrays, frozen=False):
        # copy: training must never mutate the caller's checkpoint arrays
        layers = []
        for i in range(1, 5):
            w = Tensor(arrays[f"backbone.conv{i}.weight"].copy(), requires_grad=True)
            b = Tensor(arrays[f"backbone.conv{i}.bias"].copy(), requires_grad=True)
            layers.append((w, b))
        return cls(layers, frozen=frozen)

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(self.layers, start=1):
            out[f"backbone.conv{i}.weight"] = w
            out[f"backbone.conv{i}.bias"] = b
        return out

    def forward(self, g, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h % 4 or w % 4:
            raise ShapeError(f"backbone input spatial size must be divisible by 4, got {h}x{w}")
        t = x
        for i, (wt, bt) in enumerate(self.layers):
            t = relu(g, conv2d(g, t, wt, bt, 1, 1))
            if i in (1, 3):
                t = maxpool2d(g, t, 2, 2)
        return t

    @property
    def out_channels(self):
        return BACKBONE_WIDTHS[-1]


class BCNet:
    """Binary background-vs-target classifier on frozen backbone features."""

    def __init__(self, backbone: Backbone, fc_w: Tensor, fc_b: Tensor):
        self.backbone = backbone
        self.fc_w = fc_w
        self.fc_b = fc_b

    @classmethod
    def init(cls, backbone, rng, dtype=np.float32):
        d = backbone.out_channels
        return cls(backbone, _kaiming(rng, (d, 1), d, dtype), _zeros((1,), dtype))

    @classmethod
    def from_arrays(cls, arrays):
        bb = Backbone.from_arrays(arrays, frozen=True)
        net = cls(bb, Tensor(arrays["bc.fc.weight"].copy(), requires_grad=True),
                  Tensor(arrays["bc.fc.bias"].copy(), requires_grad=True))
        return net

    def parameters(self):
        out = self.backbone.parameters()
        out["bc.fc.weight"] = self.fc_w
        out["bc.fc.bias"] = self.fc_b
        return out

    def head_parameters(self):
        return {"bc.fc.weight": self.fc_w, "bc.fc.bias": self.fc_b}

    def forward(self, g, x: Tensor) -> Tensor:
        """Returns the (N,1) pre-sigmoid logit column."""
        feats = self.backbone.forward(g, x)
        pooled = gap(g, feats)
        return dense(g, pooled, self.fc_w, self.fc_b)


class CTNet:
    """Classifier whose score map doubles as the per-class activation map."""

    def __init__(self, backbone, head_layers, cam_layers, n_classes):
        self.backbone = backbone
        self.head_layers = head_layers  # [(w,b)] * 3
        self.cam_layers = cam_layers    # [(w,b)] * 3
        self.n_classes = n_classes

    @classmethod
    def init(cls, backbone, n_classes, rng, dtype=np.float32):
        d = backbone.out_channels
        head = [
            (_kaiming(rng, (HEAD_WIDTH, d, 3, 3), d * 9, dtype), _zeros((HEAD_WIDTH,), dtype)),
            (_kaiming(rng, (HEAD_WIDTH, HEAD_WIDTH, 3, 3), HEAD_WIDTH * 9, dtype), _zeros((HEAD_WIDTH,), dtype)),
            (_kaiming(rng, (n_classes, HEAD_WIDTH, 1, 1), HEAD_WIDTH, dtype), _zeros((n_classes,), dtype)),
        ]
        cam = [
            (_kaiming(rng, (HEAD_WIDTH, n_classes, 3, 3), n_classes * 9, dtype), _zeros((HEAD_WIDTH,), dtype)),
            (_kaiming(rng, (HEAD_WIDTH, HEAD_WIDTH, 3, 3), HEAD_WIDTH * 9, dtype), _zeros((HEAD_WIDTH,), dtype)),
            (_kaiming(rng, (1, HEAD_WIDTH, 1, 1), HEAD_WIDTH, dtype), _zeros((1,), dtype)),
        ]
        return cls(backbone, head, cam, n_classes)

    @classmethod
    def from_arrays(cls, arrays):
        bb = Backbone.from_arrays(arrays, frozen=False)
        head = []
        cam = []
        for i in range(1, 4):
            head.append((Tensor(arrays[f"head.conv{i}.weight"].copy(), requires_grad=True),
                         Tensor(arrays[f"head.conv{i}.bias"].copy(), requires_grad=True)))
            cam.append((Tensor(arrays[f"cam.conv{i}.weight"].copy(), requires_grad=True),
                        Tensor(arrays[f"cam.conv{i}.bias"].copy(), requires_grad=True)))
        n_classes = head[2][0].shape[0]
        return cls(bb, head, cam, n_classes)

    def parameters(self):
        out = self.backbone.parameters()
        for i, (w, b) in enumerate(self.head_layers, start=1):
            out[f"head.conv{i}.weight"] = w
            out[f"head.conv{i}.bias"] = b
        for i, (w, b) in enumerate(self.cam_layers, start=1):
            out[f"cam.conv{i}.weight"] = w
            out[f"cam.conv{i}.bias"] = b
        return out

    def forward(self, g, x: Tensor):
        """Returns (logits (N,n), score_map (N,n,h,w), cam (N,1,H,W)).

        logits are literally gap(score_map): same recorded op, so the
        identity is exact, not approximate.
        """
        n, c, h, w = x.shape
        feats = self.backbone.forward(g, x)
        t = relu(g, conv2d(g, feats, *self.head_layers[0], 1, 1))
        t = relu(g, conv2d(g, t, *self.head_layers[1], 1, 1))
        score = conv2d(g, t, *self.head_layers[2], 1, 0)
        logits = gap(g, score)
        a = relu(g, conv2d(g, score, *self.cam_layers[0], 1, 1))
        a = relu(g, conv2d(g, a, *self.cam_layers[1], 1, 1))
        a = conv2d(g, a, *self.cam_layers[2], 1, 0)
        a = sigmoid(g, a)
        cam = bilinear_upsample(g, a, h, w)
        return logits, score, cam


def params_to_arrays(params):
    return {name: t.data for name, t in params.items()}


# ---------------------------------------------------------------------------
# losses


def bce_loss(g, probs: Tensor, labels) -> Tensor:
    """Binary cross entropy, mean over elements. labels must be 0/1; probs
    are clamped to [1e-7, 1-1e-7] before the logs."""
    y = np.asarray(labels, dtype=probs.dtype).reshape(probs.shape)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss labels must be exactly 0 or 1")
    p = np.clip(probs.data, PROB_EPS, 1.0 - PROB_EPS)
    per = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    out = Tensor(np.asarray(per.mean(), dtype=probs.dtype))

    if g is not None and g.wants_grad((probs,)):
        def bwd(go, need):
            if not need[0]:
                return (None,)
            dp = -(y / p - (1.0 - y) / (1.0 - p)) / per.size
            return (go * dp,)

        g.record("bce_loss", (probs,), out, bwd)
    return out


def cls_loss(g, logits: Tensor, labels) -> Tensor:
    """Softmax cross entropy against integer class ids, mean over the batch."""
    n, k = logits.shape
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"cls_loss expects {n} labels, got shape {tuple(y.shape)}")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        bad = y[(y < 0) | (y >= k)][0]
        raise ValueError(f"class label {bad} out of range [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(np.asarray(-logp[np.arange(n), y].mean(), dtype=logits.dtype))

    if g is not None and g.wants_grad((logits,)):
        def bwd(go, need):
            if not need[0]:
                return (None,)
            grad = np.exp(logp)
            grad[np.arange(n), y] -= 1.0
            return (go * grad / n,)

        g.record("cls_loss", (logits,), out, bwd)
    return out


def mask_loss(g, cam: Tensor, masks, full_bce=False) -> Tensor:
    """Pixel supervision loss: per image, -sum(M * log A) over all pixels
    (positive-pixel term only); with full_bce also -sum((1-M) * log(1-A)).
    Batches reduce by mean over images. cam: (N,1,H,W) or (H,W); masks
    match spatially with values in {0,1}."""
    a = cam.data
    if a.ndim == 2:
        a = a[None, None]
    m = np.asarray(masks, dtype=a.dtype)
    if m.ndim == 2:
        m = m[None]
    n = a.shape[0]
    if a.shape[2:] != m.shape[1:] or m.shape[0] != n:
        raise ShapeError(f"mask_loss shape mismatch: cam {tuple(cam.shape)} vs masks {m.shape}")
    ac = np.clip(a[:, 0], CAM_EPS, 1.0 - CAM_EPS)
    per = -(m * np.log(ac)).sum(axis=(1, 2))
    if full_bce:
        per = per - ((1.0 - m) * np.log1p(-ac)).sum(axis=(1, 2))
    out = Tensor(np.asarray(per.mean(), dtype=cam.dtype))

    if g is not None and g.wants_grad((cam,)):
        def bwd(go, need):
            if not need[0]:
                return (None,)
            da = -(m / ac) / n
            if full_bce:
                da = da + ((1.0 - m) / (1.0 - ac)) / n
            da = (go * da)[:, None]
            return (da.reshape(cam.shape),)

        g.record("mask_loss", (cam,), out, bwd)
    return out


def total_loss(g, cls_term: Tensor, mask_term, lambda_mask: float) -> Tensor:
    """cls + lambda_mask * mask. lambda_mask 0 recovers the plain-CAM
    objective; mask_term may be None in that case."""
    if lambda_mask < 0:
        raise ValueError(f"lambda_mask must be >= 0, got {lambda_mask}")
    if mask_term is None:
        return cls_term
    out = Tensor(cls_term.data + cls_term.dtype.type(lambda_mask) * mask_term.data)

    if g is not None and g.wants_grad((cls_term, mask_term)):
        def bwd(go, need):
            dc = go if need[0] else None
            dm = go * cls_term.dtype.type(lambda_mask) if need[1] else None
            return dc, dm

        g.record("total_loss", (cls_term, mask_term), out, bwd)
    return out


# ---------------------------------------------------------------------------
# convenience forwards


def bc_forward(net: BCNet, batch: Tensor, g=None) -> Tensor:
    """Logit column (N,1) for a batch; pass a Graph to enable backward."""
    return net.forward(g, batch)


def ct_forward(net: CTNet, batch: Tensor, g=None):
    return net.forward(g, batch)
