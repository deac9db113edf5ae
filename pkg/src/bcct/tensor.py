"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

The operator set is exactly what the BC/CT networks need: conv2d, maxpool2d,
global average pooling, dense, relu/sigmoid/softmax, bilinear upsampling, and
a scalar backward pass. Composite operations (the losses) register their own
nodes through Graph.record, so the tape stays generic while the op list here
stays closed.

Arrays are numpy, row-major, float32 or float64. Forward passes are pure;
recording happens only when a Graph is passed in.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when operand shapes or size parameters are incompatible."""


class GraphError(ValueError):
    """Raised when a backward pass is requested on an invalid root."""


class Tensor:
    """n-dimensional array with an optional gradient buffer.

    `data` is always C-contiguous; `grad`, when populated, matches its shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d stays 0-d: always contiguous
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flags})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Tape of recorded operations, appended in execution (topological) order.

    A graph instance must not be shared between threads; forward calls on
    disjoint graphs are safe to run concurrently.
    """

    def __init__(self):
        self.nodes = []
        self._outputs = set()

    def record(self, op, inputs, output, backward):
        """Append a node. `backward(grad_out, need)` returns one gradient
        array (or None) per input; `need[i]` says whether input i wants one."""
        self.nodes.append(_Node(op, tuple(inputs), output, backward))
        self._outputs.add(id(output))

    def owns(self, tensor):
        return id(tensor) in self._outputs

    def wants_grad(self, tensors):
        """True if any tensor either requires grad or was produced here."""
        return any(t.requires_grad or self.owns(t) for t in tensors)


def backward(g: Graph, root: Tensor):
    """Populate .grad of every requires_grad tensor with d(root)/d(tensor).

    Root must be a single-element tensor produced on `g`. Repeated calls
    accumulate into existing .grad buffers.
    """
    if g is None:
        raise GraphError("backward needs a recorded graph")
    if root.data.size != 1:
        raise ShapeError(f"backward root must be a scalar, got shape {tuple(root.shape)}")
    if not g.owns(root):
        raise GraphError("backward root was not produced on this graph")

    flow = {id(root): np.ones_like(root.data)}
    holders = {id(root): root}
    for node in reversed(g.nodes):
        go = flow.get(id(node.output))
        if go is None:
            continue
        need = tuple(t.requires_grad or g.owns(t) for t in node.inputs)
        if not any(need):
            continue
        grads = node.backward(go, need)
        for t, gr, n in zip(node.inputs, grads, need):
            if not n or gr is None:
                continue
            tid = id(t)
            if tid in flow:
                flow[tid] = flow[tid] + gr
            else:
                flow[tid] = gr
                holders[tid] = t
    for tid, t in holders.items():
        if t.requires_grad:
            t.grad = flow[tid].copy() if t.grad is None else t.grad + flow[tid]


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im_add(dxp, dcols6, stride, ho, wo):
    kh, kw = dcols6.shape[2], dcols6.shape[3]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols6[:, :, i, j]


def conv2d(g, x: Tensor, w: Tensor, b: Tensor, stride=1, pad=0) -> Tensor:
    """2-d cross-correlation with zero padding. x: (N,C,H,W), w: (K,C,kh,kw),
    b: (K,). Output spatial size floor((H+2p-kh)/stride)+1."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    n, c, h, wid = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    if b.shape != (k,):
        raise ShapeError(f"conv2d bias must have shape ({k},), got {tuple(b.shape)}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d pad must be >= 0, got {pad}")
    hp, wp = h + 2 * pad, wid + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(k, -1)
    out = np.matmul(w2, cols)
    out += b.data[:, None]
    out_t = Tensor(out.reshape(n, k, ho, wo))

    if g is not None and g.wants_grad((x, w, b)):
        def bwd(go, need):
            go2 = go.reshape(n, k, ho * wo)
            dx = dw = db = None
            if need[1]:
                # batched GEMM against the transposed-view of cols; BLAS takes
                # the transpose flag, no copy
                dw = np.matmul(go2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if need[0]:
                dcols = np.matmul(w2.T, go2)
                dxp = np.zeros_like(xp) if pad else np.zeros(x.shape, dtype=xp.dtype)
                _col2im_add(dxp, dcols.reshape(n, c, kh, kw, ho, wo), stride, ho, wo)
                dx = dxp[:, :, pad:pad + h, pad:pad + wid] if pad else dxp
            if need[2]:
                db = go.sum(axis=(0, 2, 3))
            return dx, dw, db

        g.record("conv2d", (x, w, b), out_t, bwd)
    return out_t


# ---------------------------------------------------------------------------
# pooling

def maxpool2d(g, x: Tensor, k: int, stride: int) -> Tensor:
    """k x k max pooling. Backward routes to the first maximum in row-major
    scan order within each window."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-d input, got {tuple(x.shape)}")
    if k < 1 or stride < 1:
        raise ShapeError(f"maxpool2d needs k >= 1 and stride >= 1, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"maxpool2d window {k}x{k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2, s3 = x.data.strides
    win = as_strided(x.data, shape=(n, c, ho, wo, k, k),
                     strides=(s0, s1, s2 * stride, s3 * stride, s2, s3))
    flat = win.reshape(n, c, ho, wo, k * k)
    out_t = Tensor(flat.max(axis=-1))

    if g is not None and g.wants_grad((x,)):
        arg = flat.argmax(axis=-1)

        def bwd(go, need):
            if not need[0]:
                return (None,)
            if stride == k and h == ho * k and w == wo * k:
                dwin = np.zeros((n, c, ho, wo, k * k), dtype=go.dtype)
                np.put_along_axis(dwin, arg[..., None], go[..., None], axis=-1)
                dx = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
                return (np.ascontiguousarray(dx),)
            dx = np.zeros_like(x.data)
            hh = arg // k + (np.arange(ho) * stride)[None, None, :, None]
            ww = arg % k + (np.arange(wo) * stride)[None, None, None, :]
            nn = np.arange(n)[:, None, None, None]
            cc = np.arange(c)[None, :, None, None]
            np.add.at(dx, (nn, cc, hh, ww), go)
            return (dx,)

        g.record("maxpool2d", (x,), out_t, bwd)
    return out_t


def gap(g, x: Tensor) -> Tensor:
    """Global average pooling: (N,C,H,W) -> (N,C) per-channel spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"gap expects 4-d input, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    out_t = Tensor(x.data.mean(axis=(2, 3)))

    if g is not None and g.wants_grad((x,)):
        def bwd(go, need):
            if not need[0]:
                return (None,)
            return (np.broadcast_to((go / (h * w))[:, :, None, None], x.shape),)

        g.record("gap", (x,), out_t, bwd)
    return out_t


# ---------------------------------------------------------------------------
# dense

def dense(g, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N,D) @ (D,M) + (M,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense expects 2-d input/weight, got {tuple(x.shape)} and {tuple(w.shape)}")
    n, d = x.shape
    dw, m = w.shape
    if d != dw:
        raise ShapeError(f"dense inner dimensions disagree: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    if b.shape != (m,):
        raise ShapeError(f"dense bias must have shape ({m},), got {tuple(b.shape)}")
    out_t = Tensor(x.data @ w.data + b.data)

    if g is not None and g.wants_grad((x, w, b)):
        def bwd(go, need):
            dx = go @ w.data.T if need[0] else None
            dwt = x.data.T @ go if need[1] else None
            db = go.sum(axis=0) if need[2] else None
            return dx, dwt, db

        g.record("dense", (x, w, b), out_t, bwd)
    return out_t


# ---------------------------------------------------------------------------
# activations

def relu(g, x: Tensor) -> Tensor:
    out_t = Tensor(np.maximum(x.data, 0))

    if g is not None and g.wants_grad((x,)):
        def bwd(go, need):
            if not need[0]:
                return (None,)
            return (go * (out_t.data > 0),)

        g.record("relu", (x,), out_t, bwd)
    return out_t


def sigmoid(g, x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    out_t = Tensor(out)

    if g is not None and g.wants_grad((x,)):
        def bwd(go, need):
            if not need[0]:
                return (None,)
            return (go * out_t.data * (1.0 - out_t.data),)

        g.record("sigmoid", (x,), out_t, bwd)
    return out_t


def softmax(g, x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_t = Tensor(e / e.sum(axis=-1, keepdims=True))

    if g is not None and g.wants_grad((x,)):
        def bwd(go, need):
            if not need[0]:
                return (None,)
            s = out_t.data
            return (s * (go - (go * s).sum(axis=-1, keepdims=True)),)

        g.record("softmax", (x,), out_t, bwd)
    return out_t


# ---------------------------------------------------------------------------
# bilinear upsampling

def interp_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """(dst, src) row-stochastic matrix realizing 1-d bilinear resampling with
    half-pixel centers: output i samples input at (i+0.5)*src/dst - 0.5,
    clamped to [0, src-1]."""
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, src - 1)
    r = np.zeros((dst, src), dtype=dtype)
    rows = np.arange(dst)
    np.add.at(r, (rows, i0), (1.0 - frac).astype(dtype))
    np.add.at(r, (rows, i1), frac.astype(dtype))
    return r


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize over the last two axes, same convention as
    bilinear_upsample (works for down- as well as upsampling)."""
    h, w = arr.shape[-2:]
    if out_h == h and out_w == w:
        return arr.copy()
    ry = interp_matrix(h, out_h, arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64)
    rx = interp_matrix(w, out_w, ry.dtype)
    return np.matmul(ry, np.matmul(arr, rx.T))


def bilinear_upsample(g, x: Tensor, out_h: int, out_w: int) -> Tensor:
    """(N,C,h,w) -> (N,C,H,W) with H >= h, W >= w, clamped bilinear sampling."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects 4-d input, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_upsample target size must be positive, got {out_h}x{out_w}")
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}")
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)
    out_t = Tensor(np.matmul(ry, np.matmul(x.data, rx.T)))

    if g is not None and g.wants_grad((x,)):
        def bwd(go, need):
            if not need[0]:
                return (None,)
            return (np.matmul(ry.T, np.matmul(go, rx)),)

        g.record("bilinear_upsample", (x,), out_t, bwd)
    return out_t
