"""Minimal reverse-mode differentiation over a fixed operator set.

Values live in numpy arrays (float32 storage by default, float64 in check
mode).  A forward pass records operations on a ``Graph`` tape; ``backward``
replays the tape once in reverse.  Graphs are single-use.  The operator set
is exactly what the binarized architectures need: linear, conv2d, batchnorm,
hardtanh, prelu, average pooling, global average pooling, shortcut add,
sign binarization with a pluggable surrogate rule, and softmax losses.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "Graph",
    "GraphConsumedError",
    "ShapeError",
    "add",
    "mul",
    "matmul",
    "linear",
    "conv2d",
    "batchnorm2d",
    "hardtanh",
    "prelu",
    "avg_pool2d",
    "global_avg_pool",
    "reshape",
    "sign_surrogate",
    "clamp_pass_inside",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "kl_div_logits",
    "fd_gradcheck",
]


class GraphConsumedError(RuntimeError):
    """Backward was requested on a graph that was already consumed."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Var:
    """A node in the computation: an array plus an accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Graph:
    """Single-use tape of (output, [(input, vjp)]) records, forward order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.records = []
        self.consumed = False

    def record(self, out: Var, pulls):
        self.records.append((out, pulls))

    def new(self, data, requires_grad=False) -> Var:
        return Var(np.asarray(data, dtype=self.dtype), requires_grad=requires_grad)

    def backward(self, out: Var, seed=1.0):
        """Propagate ``seed`` from ``out`` back through the tape.

        Populates ``.grad`` on every Var that participated.  The graph is
        consumed afterwards; a second call raises ``GraphConsumedError``.
        """
        if self.consumed:
            raise GraphConsumedError("graph already consumed by a previous backward")
        self.consumed = True
        out.grad = np.asarray(seed, dtype=self.dtype) * np.ones_like(out.data)
        for node, pulls in reversed(self.records):
            g = node.grad
            if g is None:
                continue
            for var, vjp in pulls:
                contrib = vjp(g)
                if contrib is None:
                    continue
                contrib = np.asarray(contrib, dtype=self.dtype)
                if var.grad is None:
                    var.grad = contrib
                else:
                    var.grad = var.grad + contrib


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _val(x):
    return x.data if isinstance(x, Var) else np.asarray(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(g: Graph, a: Var, b: Var) -> Var:
    out = Var(a.data + b.data)
    if g is not None:
        g.record(out, [(a, lambda u, s=a.shape: _unbroadcast(u, s)),
                       (b, lambda u, s=b.shape: _unbroadcast(u, s))])
    return out


def mul(g: Graph, a: Var, b: Var) -> Var:
    out = Var(a.data * b.data)
    if g is not None:
        av, bv = a.data, b.data
        g.record(out, [(a, lambda u: _unbroadcast(u * bv, av.shape)),
                       (b, lambda u: _unbroadcast(u * av, bv.shape))])
    return out


def reshape(g: Graph, x: Var, shape) -> Var:
    old = x.data.shape
    out = Var(x.data.reshape(shape))
    if g is not None:
        g.record(out, [(x, lambda u: u.reshape(old))])
    return out


def hardtanh(g: Graph, x: Var, lo=-1.0, hi=1.0) -> Var:
    out = Var(np.clip(x.data, lo, hi))
    if g is not None:
        mask = ((x.data > lo) & (x.data < hi)).astype(x.data.dtype)
        g.record(out, [(x, lambda u: u * mask)])
    return out


def prelu(g: Graph, x: Var, slope: Var) -> Var:
    """Channelwise PReLU.  ``slope`` has shape (C,); x is (N,C,...) or (N,C)."""
    xd = x.data
    sl = slope.data.reshape((1, -1) + (1,) * (xd.ndim - 2))
    pos = xd > 0
    out = Var(np.where(pos, xd, xd * sl))
    if g is not None:
        def dx(u):
            return np.where(pos, u, u * sl)

        def dslope(u):
            contrib = np.where(pos, 0.0, u * xd)
            axes = (0,) + tuple(range(2, xd.ndim))
            return contrib.sum(axis=axes)

        g.record(out, [(x, dx), (slope, dslope)])
    return out


def clamp_pass_inside(g: Graph, x: Var, bound) -> Var:
    """Clamp to [-bound, bound]; backward passes gradient only inside."""
    if np.isscalar(bound) or np.ndim(bound) == 0:
        b = float(bound)
    else:
        b = np.asarray(bound, dtype=x.data.dtype)
    out = Var(np.clip(x.data, -b, b))
    if g is not None:
        mask = (np.abs(x.data) <= b).astype(x.data.dtype)
        g.record(out, [(x, lambda u: u * mask)])
    return out


def sign_surrogate(g: Graph, x: Var, backward_rule) -> Var:
    """Binarize to {-1,+1} with sign(0)=+1; backward uses ``backward_rule``.

    ``backward_rule(x_saved, upstream) -> grad`` is supplied by the scheme
    table and is the analytic derivative of the documented smooth surrogate.
    """
    out = Var(np.where(x.data >= 0, 1.0, -1.0).astype(x.data.dtype))
    if g is not None:
        saved = x.data
        g.record(out, [(x, lambda u: backward_rule(saved, u))])
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(g: Graph, a: Var, b: Var) -> Var:
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner mismatch: {a.data.shape} @ {b.data.shape}")
    out = Var(a.data @ b.data)
    if g is not None:
        av, bv = a.data, b.data
        g.record(out, [(a, lambda u: u @ bv.T), (b, lambda u: av.T @ u)])
    return out


def linear(g: Graph, x: Var, w: Var, b: Var = None) -> Var:
    """x:(N,F) @ w:(O,F).T + b:(O,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear shapes: x{x.data.shape} w{w.data.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    out = Var(y)
    if g is not None:
        xv, wv = x.data, w.data
        pulls = [(x, lambda u: u @ wv), (w, lambda u: u.T @ xv)]
        if b is not None:
            pulls.append((b, lambda u: u.sum(axis=0)))
        g.record(out, pulls)
    return out


# ---------------------------------------------------------------------------
# convolution (im2col lowering)
# ---------------------------------------------------------------------------

def _conv_out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """x:(N,C,H,W) -> (N, C*kh*kw, OH*OW), zero padded."""
    n, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col` (scatter-add back to the input layout)."""
    n, c, h, w = x_shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad > 0:
        xp = xp[:, :, pad:h + pad, pad:w + pad]
    return xp


def conv2d(g: Graph, x: Var, w: Var, b: Var = None, stride=1, pad=0) -> Var:
    """x:(N,C,H,W), w:(O,C,KH,KW) -> (N,O,OH,OW)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d shapes: x{x.data.shape} w{w.data.shape}")
    n, c, h, wd = x.data.shape
    o, _, kh, kw = w.data.shape
    oh, ow = _conv_out_hw(h, wd, kh, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output collapsed: input {h}x{wd}, kernel {kh}x{kw}")
    cols = im2col(x.data, kh, kw, stride, pad)          # (N, CKK, OHOW)
    wmat = w.data.reshape(o, -1)                        # (O, CKK)
    y = np.einsum("of,nfp->nop", wmat, cols, optimize=True)
    if b is not None:
        y = y + b.data.reshape(1, o, 1)
    out = Var(y.reshape(n, o, oh, ow))
    if g is not None:
        xshape = x.data.shape

        def dx(u):
            um = u.reshape(n, o, -1)
            dcols = np.einsum("of,nop->nfp", wmat, um, optimize=True)
            return col2im(dcols, xshape, kh, kw, stride, pad)

        def dw(u):
            um = u.reshape(n, o, -1)
            return np.einsum("nop,nfp->of", um, cols, optimize=True).reshape(w.data.shape)

        pulls = [(x, dx), (w, dw)]
        if b is not None:
            pulls.append((b, lambda u: u.sum(axis=(0, 2, 3))))
        g.record(out, pulls)
    return out


# ---------------------------------------------------------------------------
# normalization / pooling
# ---------------------------------------------------------------------------

def batchnorm2d(g: Graph, x: Var, gamma: Var, beta: Var, running_mean, running_var,
                training: bool, momentum=0.1, eps=1e-5) -> Var:
    """Batchnorm over (N,H,W) per channel.

    In training mode uses batch statistics and updates the running buffers
    in place; in eval mode uses the frozen running statistics (attacks probe
    a fixed classifier).
    """
    xd = x.data
    axes = (0, 2, 3) if xd.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if xd.ndim == 4 else (1, -1)
    if training:
        # 64-bit accumulation for the reductions, stored back in 32-bit
        mean = xd.mean(axis=axes, dtype=np.float64).astype(xd.dtype)
        var = xd.var(axis=axes, dtype=np.float64).astype(xd.dtype)
        running_mean *= (1 - momentum)
        running_mean += momentum * mean
        running_var *= (1 - momentum)
        running_var += momentum * var
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(shape)) * inv.reshape(shape)
    out = Var(gamma.data.reshape(shape) * xhat + beta.data.reshape(shape))
    if g is not None:
        m = xd.size // xd.shape[1]

        def dx(u):
            gi = gamma.data.reshape(shape) * inv.reshape(shape)
            if training:
                du_sum = u.sum(axis=axes).reshape(shape)
                duxhat_sum = (u * xhat).sum(axis=axes).reshape(shape)
                return gi * (u - du_sum / m - xhat * duxhat_sum / m)
            return gi * u

        g.record(out, [(x, dx),
                       (gamma, lambda u: (u * xhat).sum(axis=axes)),
                       (beta, lambda u: u.sum(axis=axes))])
    return out


def avg_pool2d(g: Graph, x: Var, k=2, stride=None) -> Var:
    stride = stride or k
    n, c, h, w = x.data.shape
    oh, ow = _conv_out_hw(h, w, k, k, stride, 0)
    cols = im2col(x.data.reshape(n * c, 1, h, w), k, k, stride, 0)
    y = cols.mean(axis=1, dtype=np.float64).astype(x.data.dtype)
    out = Var(y.reshape(n, c, oh, ow))
    if g is not None:
        xshape = x.data.shape

        def dx(u):
            um = np.repeat(u.reshape(n * c, 1, -1) / (k * k), k * k, axis=1)
            return col2im(um, (n * c, 1, h, w), k, k, stride, 0).reshape(xshape)

        g.record(out, [(x, dx)])
    return out


def global_avg_pool(g: Graph, x: Var) -> Var:
    n, c, h, w = x.data.shape
    out = Var(x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.data.dtype))
    if g is not None:
        g.record(out, [(x, lambda u: np.broadcast_to(
            u[:, :, None, None] / (h * w), (n, c, h, w)).astype(u.dtype))])
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _log_softmax_np(z):
    z64 = z.astype(np.float64)
    m = z64.max(axis=-1, keepdims=True)
    s = z64 - m
    return (s - np.log(np.exp(s).sum(axis=-1, keepdims=True))).astype(z.dtype)


def softmax(z):
    return np.exp(_log_softmax_np(np.asarray(z)))


def log_softmax(z):
    return _log_softmax_np(np.asarray(z))


def cross_entropy(g: Graph, logits: Var, y) -> Var:
    """Mean softmax cross-entropy; y is an int label vector."""
    y = np.asarray(y)
    n, k = logits.data.shape
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"label out of range [0,{k}): {y.min()}..{y.max()}")
    ls = _log_softmax_np(logits.data)
    out = Var(np.float64(-ls[np.arange(n), y].mean(dtype=np.float64)).astype(logits.data.dtype))
    if g is not None:
        p = np.exp(ls.astype(np.float64)).astype(logits.data.dtype)

        def dlogits(u):
            grad = p.copy()
            grad[np.arange(n), y] -= 1.0
            return grad * (u / n)

        g.record(out, [(logits, dlogits)])
    return out


def kl_div_logits(g: Graph, logits_p: Var, logits_q: Var) -> Var:
    """Mean KL( softmax(p) || softmax(q) ); differentiable in both operands."""
    n = logits_p.data.shape[0]
    lp = _log_softmax_np(logits_p.data).astype(np.float64)
    lq = _log_softmax_np(logits_q.data).astype(np.float64)
    p = np.exp(lp)
    out = Var((p * (lp - lq)).sum() / n)
    if g is not None:
        q = np.exp(lq)
        kl_rows = (p * (lp - lq)).sum(axis=-1, keepdims=True)

        def dp(u):
            return (p * ((lp - lq) - kl_rows)) * (u / n)

        def dq(u):
            return (q - p) * (u / n)

        g.record(out, [(logits_p, dp), (logits_q, dq)])
    return out


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def fd_gradcheck(fn, variables, tolerance=1e-3, h=None, dtype=np.float64):
    """Compare analytic gradients of scalar ``fn`` against central differences.

    ``fn(graph) -> Var`` must rebuild the forward pass from ``variables``
    (list of Var) on each call.  Perturbs every coordinate of every variable.
    Returns a dict report; ``report["pass"]`` is True iff the max relative
    error is within ``tolerance``.
    """
    dtype = np.dtype(dtype)
    if h is None:
        h = 1e-5 if dtype == np.float64 else 1e-2
    for v in variables:
        v.data = v.data.astype(dtype)
        v.grad = None
    g = Graph(dtype=dtype)
    out = fn(g)
    g.backward(out)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite forward value in gradcheck")
    max_rel = 0.0
    for v in variables:
        analytic = v.grad if v.grad is not None else np.zeros_like(v.data)
        flat = v.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(None).data)
            flat[i] = orig - h
            fm = float(fn(None).data)
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        num = num.reshape(v.data.shape)
        # relative to the per-variable gradient scale so near-zero
        # coordinates are judged against the magnitude that matters
        mags = np.abs(analytic) + np.abs(num)
        scale = float(mags.max()) if mags.size else 0.0
        rel = np.abs(analytic - num) / (mags + max(scale, 1e-8))
        max_rel = max(max_rel, float(rel.max()) if rel.size else 0.0)
    return {"max_rel_error": max_rel, "tolerance": tolerance, "pass": max_rel <= tolerance}
