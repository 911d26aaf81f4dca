"""Reverse-mode autodiff over a small fixed op vocabulary.

Tensors wrap numpy arrays (float32 by default; float64 is allowed so
tests can replay a forward pass at higher precision). Each op that
consumes a gradient-requiring tensor records a backward closure; calling
:func:`backward` on a scalar loss walks the recorded graph in reverse
topological order and accumulates ``grad`` buffers on the leaves.

The vocabulary is intentionally closed: dense affine maps, elementwise
arithmetic, the four activations used by the body networks, reductions
(64-bit accumulation), concat/gather/reshape plumbing, trilinear volume
sampling, 2x2 average pooling, and the loss primitives. There is no
general graph compiler and no in-place mutation of recorded tensors.

A recorded graph has a single owner: one training step builds and
consumes one graph on one thread. Forward evaluation of frozen
parameters is read-only and safe to share.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit


def softplus_np(x: np.ndarray) -> np.ndarray:
    """max(x,0) + log1p(exp(-|x|)); numpy's SIMD exp beats logaddexp."""
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


_SIG_EPS = 1e-7


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Logistic function clamped strictly inside (0,1) (float32 expit
    saturates to exactly 1 beyond |x| ~ 17)."""
    return np.clip(expit(x), _SIG_EPS, 1.0 - _SIG_EPS)

_GRAD_ENABLED = True

_EPS_BCE = 1e-7


@contextmanager
def no_grad():
    """Disable recording inside the block (inference / oracle passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus an optional gradient buffer and tape hooks."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=np.float32):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; every overload routes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def bwd(g):
        a.requires_grad and a.accumulate(_unbroadcast(g, a.shape))
        b.requires_grad and b.accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data - b.data

    def bwd(g):
        a.requires_grad and a.accumulate(_unbroadcast(g, a.shape))
        b.requires_grad and b.accumulate(-_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data * b.data

    def bwd(g):
        a.requires_grad and a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.requires_grad and b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * a.data.dtype.type(s)

    def bwd(g):
        a.accumulate(g * a.data.dtype.type(s))

    return _make(out_data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def bwd(g):
        a.requires_grad and a.accumulate(g @ b.data.T)
        b.requires_grad and b.accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b for x [N, in], w [in, out], b [out]."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# activations and pointwise math

def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def bwd(g):
        x.accumulate(g * (x.data > 0))

    return _make(out_data, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    out_data = softplus_np(x.data).astype(x.data.dtype)

    def bwd(g):
        x.accumulate(g * expit(x.data))

    return _make(out_data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # stable evaluation; output is strictly inside (0,1)
    out_data = sigmoid_np(x.data).astype(x.data.dtype)

    def bwd(g):
        x.accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def bwd(g):
        x.accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(g):
        x.accumulate(g * out_data)

    return _make(out_data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def bwd(g):
        x.accumulate(g / x.data)

    return _make(out_data, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def bwd(g):
        x.accumulate(g * 0.5 / out_data)

    return _make(out_data, (x,), bwd)


def square(x: Tensor) -> Tensor:
    out_data = x.data * x.data

    def bwd(g):
        x.accumulate(g * 2.0 * x.data)

    return _make(out_data, (x,), bwd)


def absolute(x: Tensor) -> Tensor:
    out_data = np.abs(x.data)

    def bwd(g):
        x.accumulate(g * np.sign(x.data))

    return _make(out_data, (x,), bwd)


def reciprocal(x: Tensor) -> Tensor:
    out_data = 1.0 / x.data

    def bwd(g):
        x.accumulate(-g * out_data * out_data)

    return _make(out_data.astype(x.data.dtype), (x,), bwd)


# ---------------------------------------------------------------------------
# reductions (sums accumulate in 64-bit, result cast back to input dtype)

def ssum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def bwd(g):
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x.accumulate(np.broadcast_to(gg, x.shape).copy())

    return _make(out_data, (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return scale(ssum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = (e / e.sum(axis=-1, keepdims=True)).astype(x.data.dtype)

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        x.accumulate(out_data * (g - dot))

    return _make(out_data, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = (shifted - lse).astype(x.data.dtype)

    def bwd(g):
        x.accumulate(g - np.exp(out_data) * g.sum(axis=-1, keepdims=True))

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing

def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p.requires_grad and p.accumulate(piece)

    return _make(out_data, tuple(parts), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out_data = x.data[..., start:stop]

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[..., start:stop] = g
        x.accumulate(buf)

    return _make(out_data, (x,), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out_data = x.data[idx]

    def bwd(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        x.accumulate(buf)

    return _make(out_data, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bwd(g):
        x.accumulate(g.reshape(x.shape))

    return _make(out_data, (x,), bwd)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Tile a [D] or [1, D] tensor into [n, D]."""
    row = x.data.reshape(1, -1)
    out_data = np.repeat(row, n, axis=0)

    def bwd(g):
        x.accumulate(g.sum(axis=0, dtype=np.float64).astype(x.data.dtype).reshape(x.shape))

    return _make(out_data, (x,), bwd)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 stride-2 average pooling on an [H, W, C] tensor (H, W even)."""
    h, w, c = x.shape
    blocks = x.data.reshape(h // 2, 2, w // 2, 2, c)
    out_data = blocks.mean(axis=(1, 3), dtype=np.float64).astype(x.data.dtype)

    def bwd(g):
        spread = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * x.data.dtype.type(0.25)
        x.accumulate(spread)

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# trilinear volume sampling

def _trilinear_coords(volume_res: int, points: np.ndarray):
    g = (points + 1.0) * 0.5 * (volume_res - 1)
    g = np.clip(g, 0.0, volume_res - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), volume_res - 2)
    f = g - i0
    return g, i0, f


def trilinear(volume: Tensor, points: Tensor) -> Tensor:
    """Trilinear sample of volume [R,R,R,C] at points [N,3] in [-1,1]^3.

    Points outside the cube are clamped to the boundary. Differentiable
    with respect to both the volume and the query points.
    """
    res = volume.shape[0]
    pts = points.data.astype(np.float64)
    g, i0, f = _trilinear_coords(res, pts)
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]

    corners = []
    weights = []
    for cx in (0, 1):
        wx = fx if cx else (1.0 - fx)
        for cy in (0, 1):
            wy = fy if cy else (1.0 - fy)
            for cz in (0, 1):
                wz = fz if cz else (1.0 - fz)
                corners.append((ix + cx, iy + cy, iz + cz))
                weights.append(wx * wy * wz)

    vol = volume.data
    out_data = np.zeros((pts.shape[0], vol.shape[3]), dtype=np.float64)
    for (cix, ciy, ciz), w in zip(corners, weights):
        out_data += w * vol[cix, ciy, ciz]
    out_data = out_data.astype(volume.data.dtype)

    def bwd(g_out):
        if volume.requires_grad:
            dvol = np.zeros_like(volume.data)
            for (cix, ciy, ciz), w in zip(corners, weights):
                np.add.at(dvol, (cix, ciy, ciz), (w * g_out).astype(volume.data.dtype))
            volume.accumulate(dvol)
        if points.requires_grad:
            # d(out)/d(grid coord) from corner differences; clamped axes get zero
            vals = [vol[cix, ciy, ciz].astype(np.float64) for (cix, ciy, ciz) in corners]
            # corner order: (cx, cy, cz) lexicographic with cz fastest
            v000, v001, v010, v011, v100, v101, v110, v111 = vals
            wx0, wx1 = (1.0 - fx), fx
            wy0, wy1 = (1.0 - fy), fy
            wz0, wz1 = (1.0 - fz), fz
            d_dx = (wy0 * wz0 * (v100 - v000) + wy0 * wz1 * (v101 - v001)
                    + wy1 * wz0 * (v110 - v010) + wy1 * wz1 * (v111 - v011))
            d_dy = (wx0 * wz0 * (v010 - v000) + wx0 * wz1 * (v011 - v001)
                    + wx1 * wz0 * (v110 - v100) + wx1 * wz1 * (v111 - v101))
            d_dz = (wx0 * wy0 * (v001 - v000) + wx0 * wy1 * (v011 - v010)
                    + wx1 * wy0 * (v101 - v100) + wx1 * wy1 * (v111 - v110))
            inside = ((g > 0.0) & (g < res - 1)).astype(np.float64)
            s = 0.5 * (res - 1)
            gp = np.stack([
                (g_out * d_dx).sum(axis=1) * s * inside[:, 0],
                (g_out * d_dy).sum(axis=1) * s * inside[:, 1],
                (g_out * d_dz).sum(axis=1) * s * inside[:, 2],
            ], axis=1)
            points.accumulate(gp.astype(points.data.dtype))

    return _make(out_data, (volume, points), bwd)


def trilinear_np(volume: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Forward-only trilinear sampling for untaped evaluation paths."""
    res = volume.shape[0]
    _, i0, f = _trilinear_coords(res, np.asarray(points, dtype=np.float64))
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    out = np.zeros((points.shape[0], volume.shape[3]), dtype=np.float64)
    for cx in (0, 1):
        wx = fx if cx else (1.0 - fx)
        for cy in (0, 1):
            wy = fy if cy else (1.0 - fy)
            for cz in (0, 1):
                wz = fz if cz else (1.0 - fz)
                out += (wx * wy * wz) * volume[ix + cx, iy + cy, iz + cz]
    return out.astype(volume.dtype)


# ---------------------------------------------------------------------------
# loss primitives

def bce(pred: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy; pred is clamped to [eps, 1-eps]."""
    t = np.asarray(target, dtype=pred.data.dtype)
    p = np.clip(pred.data, _EPS_BCE, 1.0 - _EPS_BCE)
    out_data = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))

    def bwd(g):
        live = (pred.data > _EPS_BCE) & (pred.data < 1.0 - _EPS_BCE)
        dp = -(t / p - (1.0 - t) / (1.0 - p))
        pred.accumulate(g * dp * live)

    return _make(out_data.astype(pred.data.dtype), (pred,), bwd)


def cross_entropy_logits(logits: Tensor, label_idx: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels against [N, C] logits."""
    ls = log_softmax(logits)
    n = ls.shape[0]
    picked = gather_flat(ls, np.arange(n) * ls.shape[1] + np.asarray(label_idx, dtype=np.int64))
    return scale(ssum(picked), -1.0 / n)


def gather_flat(x: Tensor, flat_idx: np.ndarray) -> Tensor:
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    out_data = x.data.reshape(-1)[flat_idx]

    def bwd(g):
        buf = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(buf, flat_idx, g)
        x.accumulate(buf.reshape(x.shape))

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# backward driver

def backward(loss: Tensor):
    """Populate grad buffers of every tensor the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or node._backward is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._backward is not None:
                stack.append((p, False))
            # leaves have no closure but still need grads; handled by hooks

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        node._backward(node.grad if node.grad is not None else np.zeros_like(node.data))
        node._parents = ()
        node._backward = None
        if node is not loss:
            node.grad = None


def assert_finite(x: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError(f"non-finite values in {what}")
