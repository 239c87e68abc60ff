"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every differentiable operation in the package is built from the primitives
here. Ops compute eagerly; when a Tape is active and an input requires
gradients, a backward closure is appended to the tape. Backward replays the
tape in exact reverse order, accumulating into ``.grad`` buffers.

Tensors are immutable after creation (by convention: nothing here writes to
``data`` of a non-parameter tensor). A tape belongs to one thread; clear it
after each optimizer step to free the graph.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

FLOAT = np.float64


class NonFiniteError(RuntimeError):
    """Raised when a finite-checking tape sees a NaN/Inf op output."""

    def __init__(self, op_name):
        super().__init__(f"non-finite values produced by op '{op_name}'")
        self.op_name = op_name


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=FLOAT)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named trainable tensor; name is a dotted path unique within a model."""

    __slots__ = ("tensor", "name")

    def __init__(self, data, name):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.shape})"


class Tape:
    """Ordered record of forward ops; backward walks it strictly in reverse."""

    __slots__ = ("nodes", "check_finite")

    def __init__(self, check_finite=False):
        self.nodes = []
        self.check_finite = check_finite

    def backward(self, loss):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for _name, out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)

    def clear(self):
        self.nodes.clear()


_ACTIVE_TAPE = None


@contextmanager
def recording(tape):
    """Make ``tape`` the active tape within the block (single-threaded)."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


def active_tape():
    return _ACTIVE_TAPE


def _tracked(*tensors):
    if _ACTIVE_TAPE is None:
        return False
    return any(t.requires_grad for t in tensors if isinstance(t, Tensor))


def _record(name, out, backward_fn):
    tape = _ACTIVE_TAPE
    if tape.check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(name)
    tape.nodes.append((name, out, backward_fn))


def _accum(t, g):
    if isinstance(t, Tensor) and t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=FLOAT, copy=True)
        else:
            t.grad += g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, requires_grad=_tracked(a, b))
    if out.requires_grad:
        def backward(g):
            _accum(a, g)
            _accum(b, g)
        _record("add", out, backward)
    return out


def add_n(tensors):
    tensors = list(tensors)
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        acc += t.data
    out = Tensor(acc, requires_grad=_tracked(*tensors))
    if out.requires_grad:
        def backward(g):
            for t in tensors:
                _accum(t, g)
        _record("add_n", out, backward)
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c, requires_grad=_tracked(a))
    if out.requires_grad:
        def backward(g):
            _accum(a, g * c)
        _record("scale", out, backward)
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=_tracked(a))
    if out.requires_grad:
        mask = a.data > 0
        def backward(g):
            _accum(a, g * mask)
        _record("relu", out, backward)
    return out


def softplus(a):
    # log(1 + exp(x)) == max(x, 0) + log1p(exp(-|x|)), stable for large |x|
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(y, requires_grad=_tracked(a))
    if out.requires_grad:
        sig = 1.0 / (1.0 + np.exp(-x))
        def backward(g):
            _accum(a, g * sig)
        _record("softplus", out, backward)
    return out


def take_rows(a, idx):
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx], requires_grad=_tracked(a))
    if out.requires_grad:
        n = a.data.shape[0]
        def backward(g):
            buf = np.zeros((n,) + a.data.shape[1:], dtype=FLOAT)
            np.add.at(buf, idx, g)
            _accum(a, buf)
        _record("take_rows", out, backward)
    return out


def select_head(a, i):
    """Pick index i along axis 1 of a (B, G, C) tensor -> (B, C)."""
    out = Tensor(a.data[:, i, :], requires_grad=_tracked(a))
    if out.requires_grad:
        shape = a.data.shape
        def backward(g):
            buf = np.zeros(shape, dtype=FLOAT)
            buf[:, i, :] = g
            _accum(a, buf)
        _record("select_head", out, backward)
    return out


def sum_all(a):
    out = Tensor(np.sum(a.data), requires_grad=_tracked(a))
    if out.requires_grad:
        shape = a.data.shape
        def backward(g):
            _accum(a, np.broadcast_to(g, shape).astype(FLOAT))
        _record("sum_all", out, backward)
    return out


def mean_all(a):
    out = Tensor(np.mean(a.data), requires_grad=_tracked(a))
    if out.requires_grad:
        shape = a.data.shape
        inv = 1.0 / a.data.size
        def backward(g):
            _accum(a, np.broadcast_to(g * inv, shape).astype(FLOAT))
        _record("mean_all", out, backward)
    return out


# ---------------------------------------------------------------------------
# dense linear algebra


def linear(x, w, b=None):
    """y = x @ w (+ b). x: (..., Din), w: (Din, Dout), b: (Dout,)."""
    wt = w.tensor if isinstance(w, Parameter) else w
    bt = b.tensor if isinstance(b, Parameter) else b
    if x.data.shape[-1] != wt.data.shape[0]:
        raise ShapeError(
            f"linear: input last dim {x.data.shape} does not match weight {wt.data.shape}"
        )
    y = x.data @ wt.data
    if bt is not None:
        y = y + bt.data
    out = Tensor(y, requires_grad=_tracked(x, wt) or (bt is not None and _tracked(bt)))
    if out.requires_grad:
        def backward(g):
            _accum(x, g @ wt.data.T)
            if wt.requires_grad:
                gm = g.reshape(-1, g.shape[-1])
                xm = x.data.reshape(-1, x.data.shape[-1])
                _accum(wt, xm.T @ gm)
            if bt is not None and bt.requires_grad:
                _accum(bt, g.reshape(-1, g.shape[-1]).sum(axis=0))
        _record("linear", out, backward)
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    gt = gamma.tensor if isinstance(gamma, Parameter) else gamma
    bt = beta.tensor if isinstance(beta, Parameter) else beta
    c = x.data.shape[-1]
    if c == 0:
        raise ShapeError("layer_norm: empty feature axis")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gt.data * xhat + bt.data, requires_grad=_tracked(x, gt, bt))
    if out.requires_grad:
        def backward(g):
            if gt.requires_grad:
                _accum(gt, (g * xhat).reshape(-1, c).sum(axis=0))
            if bt.requires_grad:
                _accum(bt, g.reshape(-1, c).sum(axis=0))
            if x.requires_grad:
                gx = g * gt.data
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                _accum(x, inv * (gx - m1 - xhat * m2))
        _record("layer_norm", out, backward)
    return out


def dropout(x, p, training, rng_seed):
    """Inverted dropout: train-time zeroing with 1/(1-p) rescale, eval identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        out = Tensor(x.data, requires_grad=_tracked(x))
        if out.requires_grad:
            def backward(g):
                _accum(x, g)
            _record("dropout", out, backward)
        return out
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(x.data.shape) >= p
    factor = keep / (1.0 - p)
    out = Tensor(x.data * factor, requires_grad=_tracked(x))
    if out.requires_grad:
        def backward(g):
            _accum(x, g * factor)
        _record("dropout", out, backward)
    return out


def softmax_weights(v, tau):
    """w_k = exp(v_k / tau) / sum_i exp(v_i / tau), max-subtracted for stability.

    ``tau`` is a plain positive scalar here; the learnable-temperature path
    lives in segment_softmax_aggregate.
    """
    if tau <= 0:
        raise ValueError(f"softmax_weights: tau must be positive, got {tau}")
    if v.data.size < 1:
        raise ShapeError("softmax_weights: need at least one element")
    z = v.data / tau
    z = z - z.max()
    e = np.exp(z)
    w = e / e.sum()
    out = Tensor(w, requires_grad=_tracked(v))
    if out.requires_grad:
        def backward(g):
            # dv_j = (w_j / tau) * (g_j - sum_k g_k w_k)
            dot = float(np.sum(g * w))
            _accum(v, (w / tau) * (g - dot))
        _record("softmax_weights", out, backward)
    return out


def cross_entropy(logits, label):
    """-log softmax(logits)[label] for a 1-D logit vector."""
    c = logits.data.shape[-1]
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    if not 0 <= label < c:
        raise IndexError(f"cross_entropy: label {label} out of range [0, {c})")
    m = logits.data.max()
    lse = m + math.log(np.exp(logits.data - m).sum())
    out = Tensor(lse - logits.data[label], requires_grad=_tracked(logits))
    if out.requires_grad:
        sm = np.exp(logits.data - lse)
        def backward(g):
            d = sm.copy()
            d[label] -= 1.0
            _accum(logits, g * d)
        _record("cross_entropy", out, backward)
    return out


def cross_entropy_sum(logits, labels):
    """Sum of per-row cross entropies. logits: (B, C), labels: (B,) ints."""
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.data.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy_sum: labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError("cross_entropy_sum: label out of range")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    out = Tensor(np.sum(lse - logits.data[np.arange(b), labels]),
                 requires_grad=_tracked(logits))
    if out.requires_grad:
        sm = e / e.sum(axis=1, keepdims=True)
        def backward(g):
            d = sm.copy()
            d[np.arange(b), labels] -= 1.0
            _accum(logits, g * d)
        _record("cross_entropy_sum", out, backward)
    return out


# ---------------------------------------------------------------------------
# convolution (im2col) and spatial pooling


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=FLOAT)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    dxp = np.zeros((b, c, hp, wp), dtype=FLOAT)
    dcols = dcols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if pad:
        return dxp[:, :, pad:hp - pad, pad:wp - pad]
    return dxp


def conv2d(x, w, b=None, stride=1, pad=1):
    """2-D convolution. x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,)."""
    wt = w.tensor if isinstance(w, Parameter) else w
    bt = b.tensor if isinstance(b, Parameter) else b
    cout, cin, kh, kw = wt.data.shape
    if x.data.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape} do not match weight {wt.data.shape}"
        )
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wm = wt.data.reshape(cout, cin * kh * kw)
    y = np.einsum("ok,bkp->bop", wm, cols, optimize=True)
    if bt is not None:
        y = y + bt.data[None, :, None]
    y = y.reshape(x.data.shape[0], cout, ho, wo)
    out = Tensor(y, requires_grad=_tracked(x, wt) or (bt is not None and _tracked(bt)))
    if out.requires_grad:
        x_shape = x.data.shape
        def backward(g):
            gm = g.reshape(g.shape[0], cout, ho * wo)
            if wt.requires_grad:
                dw = np.einsum("bop,bkp->ok", gm, cols, optimize=True)
                _accum(wt, dw.reshape(wt.data.shape))
            if bt is not None and bt.requires_grad:
                _accum(bt, gm.sum(axis=(0, 2)))
            if x.requires_grad:
                dcols = np.einsum("ok,bop->bkp", wm, gm, optimize=True)
                _accum(x, _col2im(dcols, x_shape, kh, kw, stride, pad))
        _record("conv2d", out, backward)
    return out


def stripe_mean(fm, k):
    """Mean-pool (B, C, H, W) into k horizontal bands -> (B, k, C).

    Rows split into k contiguous bands; when H % k != 0 the top bands get
    the extra rows.
    """
    b, c, h, w = fm.data.shape
    if h < k:
        raise ValueError(f"stripe_mean: need H >= k, got H={h}, k={k}")
    base, rem = divmod(h, k)
    bounds = []
    row = 0
    for i in range(k):
        rows = base + (1 if i < rem else 0)
        bounds.append((row, row + rows))
        row += rows
    y = np.empty((b, k, c), dtype=FLOAT)
    for i, (r0, r1) in enumerate(bounds):
        y[:, i, :] = fm.data[:, :, r0:r1, :].mean(axis=(2, 3))
    out = Tensor(y, requires_grad=_tracked(fm))
    if out.requires_grad:
        def backward(g):
            dx = np.zeros_like(fm.data)
            for i, (r0, r1) in enumerate(bounds):
                area = (r1 - r0) * w
                dx[:, :, r0:r1, :] += (g[:, i, :] / area)[:, :, None, None]
            _accum(fm, dx)
        _record("stripe_mean", out, backward)
    return out


def group_mean(x, n_rows_per_frame, groups):
    """Per-frame mean of row groups. x: (F*N, C) -> (F, G, C).

    ``groups`` is a list of G index arrays into [0, N); group g of frame f
    averages rows f*N + groups[g].
    """
    n = n_rows_per_frame
    total, c = x.data.shape
    if total % n != 0:
        raise ShapeError(f"group_mean: {total} rows not divisible by {n}")
    f = total // n
    x3 = x.data.reshape(f, n, c)
    g_count = len(groups)
    y = np.empty((f, g_count, c), dtype=FLOAT)
    for gi, idx in enumerate(groups):
        if len(idx) == 0:
            raise ValueError(f"group_mean: group {gi} is empty")
        y[:, gi, :] = x3[:, idx, :].mean(axis=1)
    out = Tensor(y, requires_grad=_tracked(x))
    if out.requires_grad:
        def backward(g):
            dx = np.zeros((f, n, c), dtype=FLOAT)
            for gi, idx in enumerate(groups):
                dx[:, idx, :] += (g[:, gi, :] / len(idx))[:, None, :]
            _accum(x, dx.reshape(total, c))
        _record("group_mean", out, backward)
    return out


# ---------------------------------------------------------------------------
# graph-specific fused ops


def edge_messages(x, src, eps):
    """m_e = relu(x[src_e]) + eps for every directed edge. x: (V, C)."""
    src = np.asarray(src, dtype=np.intp)
    gathered = x.data[src]
    out = Tensor(np.maximum(gathered, 0.0) + eps, requires_grad=_tracked(x))
    if out.requires_grad:
        mask = gathered > 0
        n = x.data.shape[0]
        def backward(g):
            buf = np.zeros((n,) + x.data.shape[1:], dtype=FLOAT)
            np.add.at(buf, src, g * mask)
            _accum(x, buf)
        _record("edge_messages", out, backward)
    return out


def segment_softmax_aggregate(messages, seg_starts, seg_dst, n_nodes, tau):
    """Per-channel temperature-softmax aggregation of edge messages.

    ``messages`` is (E, C) sorted so edges with the same destination are
    contiguous; ``seg_starts`` are the start offsets of each segment and
    ``seg_dst`` the destination node of each segment. Nodes without incoming
    edges produce zero rows. ``tau`` is a scalar Tensor (positive).

    For each destination and channel: w_e = softmax(m_e / tau),
    out = sum_e w_e * m_e.
    """
    m = messages.data
    e_count, c = m.shape
    tau_v = float(tau.data)
    if tau_v <= 0:
        raise ValueError(f"segment softmax: tau must be positive, got {tau_v}")
    out_data = np.zeros((n_nodes, c), dtype=FLOAT)
    if e_count == 0:
        out = Tensor(out_data, requires_grad=_tracked(messages, tau))
        if out.requires_grad:
            def backward_empty(g):
                pass
            _record("segment_softmax_aggregate", out, backward_empty)
        return out

    seg_starts = np.asarray(seg_starts, dtype=np.intp)
    seg_dst = np.asarray(seg_dst, dtype=np.intp)
    # segment id for every edge
    seg_len = np.diff(np.append(seg_starts, e_count))
    seg_of_edge = np.repeat(np.arange(len(seg_starts)), seg_len)

    seg_max = np.maximum.reduceat(m, seg_starts, axis=0)
    z = np.exp((m - seg_max[seg_of_edge]) / tau_v)
    denom = np.add.reduceat(z, seg_starts, axis=0)
    w = z / denom[seg_of_edge]
    agg = np.add.reduceat(w * m, seg_starts, axis=0)  # (S, C)
    out_data[seg_dst] = agg
    out = Tensor(out_data, requires_grad=_tracked(messages, tau))
    if out.requires_grad:
        def backward(g):
            gs = g[seg_dst]  # (S, C)
            ge = gs[seg_of_edge]  # (E, C)
            if messages.requires_grad:
                # d out / d m_f = w_f * (1 + (m_f - out) / tau)
                _accum(messages, ge * w * (1.0 + (m - agg[seg_of_edge]) / tau_v))
            if tau.requires_grad:
                # d out / d tau = (out^2 - sum_e w_e m_e^2) / tau^2
                sq = np.add.reduceat(w * m * m, seg_starts, axis=0)
                _accum(tau, np.sum(gs * (agg * agg - sq)) / (tau_v * tau_v))
        _record("segment_softmax_aggregate", out, backward)
    return out


def keypoint_gather(fms, grid_pts, visible):
    """Bilinear-sample per-frame feature maps at keypoint grid coordinates.

    fms: (F, C, H, W); grid_pts: (F, N, 2) float (x, y) in feature-grid
    units; visible: (F, N) bool. Output row f*N + i is the interpolated
    C-vector, or zeros where the keypoint is invisible. Out-of-range
    coordinates clamp to the map border. Differentiable w.r.t. fms.
    """
    f, c, h, w = fms.data.shape
    n = grid_pts.shape[1]
    pts = np.asarray(grid_pts, dtype=FLOAT)
    if not np.all(np.isfinite(pts)):
        raise ValueError("keypoint_gather: non-finite coordinates")
    vis = np.asarray(visible, dtype=bool).reshape(f * n)

    x = np.clip(pts[..., 0].reshape(-1), 0.0, w - 1.0)
    y = np.clip(pts[..., 1].reshape(-1), 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    fidx = np.repeat(np.arange(f, dtype=np.intp), n)

    w00 = (1 - fy) * (1 - fx) * vis
    w01 = (1 - fy) * fx * vis
    w10 = fy * (1 - fx) * vis
    w11 = fy * fx * vis

    d = fms.data
    vals = (d[fidx, :, y0, x0] * w00[:, None] + d[fidx, :, y0, x1] * w01[:, None]
            + d[fidx, :, y1, x0] * w10[:, None] + d[fidx, :, y1, x1] * w11[:, None])
    out = Tensor(vals, requires_grad=_tracked(fms))
    if out.requires_grad:
        def backward(g):
            buf = np.zeros_like(fms.data)
            np.add.at(buf, (fidx, slice(None), y0, x0), g * w00[:, None])
            np.add.at(buf, (fidx, slice(None), y0, x1), g * w01[:, None])
            np.add.at(buf, (fidx, slice(None), y1, x0), g * w10[:, None])
            np.add.at(buf, (fidx, slice(None), y1, x1), g * w11[:, None])
            _accum(fms, buf)
        _record("keypoint_gather", out, backward)
    return out
