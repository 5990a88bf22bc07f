"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: each operation wraps a numpy result together
with the parent tensors and a closure that maps the output gradient to the
input gradients. `backward` walks the resulting DAG exactly once in reverse
topological order. Only float64 is supported; attack loops amplify
round-off, and f64 keeps the finite-difference oracles in the test suite
meaningful.

Gradients are only tracked through tensors whose `requires_grad` flag is
set (directly or via an ancestor), so plain inference builds no graph.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_gradient",
    "grad_rel_error",
    "relu",
    "conv2d",
    "linear",
    "maxpool2d",
    "avgpool2d",
    "global_avgpool",
    "softmax",
    "cross_entropy",
    "cross_entropy_each",
    "reshape",
    "flatten",
    "narrow",
    "concat",
    "tsum",
    "tmean",
    "tabs",
    "tsqrt",
    "amax",
    "take_per_row",
    "maximum_scalar",
    "reciprocal",
    "subsample",
    "upsample_nearest",
]


def _as_f64(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus optional autodiff bookkeeping.

    Tensors are immutable after creation: no public operation writes to
    `data` in place, so they are safe to share across threads.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _make(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_lift(other)))

    def __rsub__(self, other):
        return _add(_lift(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return _neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return _mul(self, Tensor(np.float64(1.0) / np.float64(other)))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    # Sum gradient over axes that numpy broadcasting expanded.
    if grad.shape == shape:
        return grad
    nd = grad.ndim - len(shape)
    if nd > 0:
        grad = grad.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _add(a, b):
    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def _mul(a, b):
    def bw(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def _neg(a):
    def bw(g):
        return (-g,)

    return Tensor._make(-a.data, (a,), bw, "neg")


# -- graph traversal ---------------------------------------------------------


def _topo(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, leaves=None):
    """Reverse-mode sweep from a scalar loss.

    Returns a dict mapping each differentiable leaf tensor reached from
    `loss` to its gradient tensor. If `leaves` is given, every tensor in it
    appears in the result, with a zero gradient when the loss does not
    depend on it. Also stores the gradient array on each leaf's `.grad`.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")

    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    result = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
            result[node] = Tensor(g)

    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                z = np.zeros_like(leaf.data)
                leaf.grad = z
                result[leaf] = Tensor(z)
    return result


# -- gradient oracle ---------------------------------------------------------


def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function, one pair of
    evaluations per element. `f` takes a Tensor and returns a scalar
    (Tensor or float); `x` may be a Tensor or an array."""
    x0 = _as_f64(x.data if isinstance(x, Tensor) else x).copy()
    if h <= 0:
        raise ValueError("h must be positive")

    def feval(arr):
        out = f(Tensor(arr))
        return float(out.data) if isinstance(out, Tensor) else float(out)

    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = feval(x0)
        flat[k] = orig - h
        fm = feval(x0)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def grad_rel_error(analytic, numeric):
    """Max elementwise difference, normalised by the largest numeric
    gradient magnitude (floored at 1 so near-zero gradients compare on an
    absolute scale)."""
    a = _as_f64(analytic)
    n = _as_f64(numeric)
    if a.shape != n.shape:
        raise ValueError(f"gradient shape mismatch: {a.shape} vs {n.shape}")
    scale = max(1.0, float(np.max(np.abs(n))) if n.size else 0.0)
    return float(np.max(np.abs(a - n))) / scale if a.size else 0.0


# -- neural-network operations ------------------------------------------------


def relu(x):
    """Elementwise max(0, x); gradient is 0 at exactly 0."""
    mask = x.data > 0.0

    def bw(g):
        return (g * mask,)

    return Tensor._make(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def _pad_input(a, padding, pad_mode):
    if padding == 0:
        return a
    pw = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    if pad_mode == "zeros":
        return np.pad(a, pw)
    if pad_mode == "circular":
        return np.pad(a, pw, mode="wrap")
    raise ValueError(f"unknown pad_mode {pad_mode!r}")


def _unpad_adjoint(gp, padding, pad_mode, H, W):
    # Adjoint of _pad_input: crop for zeros, fold wrapped borders back for
    # circular (valid because padding <= H and padding <= W is enforced).
    if padding == 0:
        return gp
    p = padding
    if pad_mode == "zeros":
        return gp[:, :, p : p + H, p : p + W]
    g = gp[:, :, p : p + H, :].copy()
    if p:
        g[:, :, H - p :, :] += gp[:, :, :p, :]
        g[:, :, :p, :] += gp[:, :, p + H :, :]
    out = g[:, :, :, p : p + W].copy()
    if p:
        out[:, :, :, W - p :] += g[:, :, :, :p]
        out[:, :, :, :p] += g[:, :, :, p + W :]
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0, pad_mode="zeros"):
    """2D cross-correlation over a [B,C,H,W] input.

    Args:
        x: input tensor [B, C, H, W].
        weight: kernel tensor [K, C, kh, kw].
        bias: optional [K] tensor added per output channel.
        stride: spatial step, >= 1.
        padding: symmetric spatial padding.
        pad_mode: "zeros" or "circular" (wrap-around, used to build exactly
            shift-equivariant encoders).

    Output spatial size is floor((H + 2*padding - kh)/stride) + 1.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be [B,C,H,W], got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d weight must be [K,C,kh,kw], got shape {weight.data.shape}")
    B, C, H, W = x.data.shape
    K, Cw, kh, kw = weight.data.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    if pad_mode == "circular" and padding > min(H, W):
        raise ValueError("circular padding larger than the image is not supported")
    if bias is not None and bias.data.shape != (K,):
        raise ValueError(f"bias must have shape ({K},), got {bias.data.shape}")

    xp = _pad_input(x.data, padding, pad_mode)
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1

    acc = np.zeros((B, Ho, Wo, K))
    for i in range(kh):
        for j in range(kw):
            view = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
            acc += np.tensordot(view, weight.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
            gx = _unpad_adjoint(gxp, padding, pad_mode, H, W)
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    view = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
                    gw[:, :, i, j] = np.tensordot(g, view, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._make(out, parents, bw, "conv2d")


def linear(x, weight, bias=None):
    """Affine map: x [B, D] times weight [K, D] transposed, plus bias [K]."""
    if x.data.ndim != 2:
        raise ValueError(f"linear input must be [B,D], got shape {x.data.shape}")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[1]:
        raise ValueError(
            f"linear weight must be [K,{x.data.shape[1]}], got shape {weight.data.shape}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ValueError(f"bias must have shape ({weight.data.shape[0]},), got {bias.data.shape}")
        out = out + bias.data[None, :]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor._make(out, parents, bw, "linear")


def _check_pool(x, k, name):
    if x.data.ndim != 4:
        raise ValueError(f"{name} input must be [B,C,H,W], got shape {x.data.shape}")
    B, C, H, W = x.data.shape
    if k < 1:
        raise ValueError(f"{name} kernel must be >= 1")
    if H % k or W % k:
        raise ValueError(f"{name} kernel {k} does not divide spatial dims {H}x{W} (no implicit padding)")
    return B, C, H, W


def maxpool2d(x, k):
    """Non-overlapping k x k max pooling; k must divide both spatial dims.
    The gradient routes to the first arg-max cell of each window."""
    B, C, H, W = _check_pool(x, k, "maxpool2d")
    Ho, Wo = H // k, W // k
    windows = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, C, Ho, Wo, k * k))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return Tensor._make(out, (x,), bw, "maxpool2d")


def avgpool2d(x, k):
    """Non-overlapping k x k mean pooling; k must divide both spatial dims."""
    B, C, H, W = _check_pool(x, k, "avgpool2d")
    Ho, Wo = H // k, W // k
    out = x.data.reshape(B, C, Ho, k, Wo, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) * inv,)

    return Tensor._make(out, (x,), bw, "avgpool2d")


def global_avgpool(x):
    """Mean over the spatial dims: [B,C,H,W] -> [B,C]."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avgpool input must be [B,C,H,W], got shape {x.data.shape}")
    B, C, H, W = x.data.shape
    out = x.data.mean(axis=(2, 3))
    inv = 1.0 / (H * W)

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, (B, C, H, W)).copy(),)

    return Tensor._make(out, (x,), bw, "global_avgpool")


def softmax(x, axis=-1):
    """Numerically stable softmax along `axis`; rows sum to 1."""
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._make(out, (x,), bw, "softmax")


def _check_labels(logits, labels):
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be [B,C], got shape {logits.data.shape}")
    B, C = logits.data.shape
    if labels.shape != (B,):
        raise ValueError(f"labels must have shape ({B},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range [0,{C}): min={labels.min()}, max={labels.max()}")
    return labels.astype(np.int64)


def cross_entropy_each(logits, labels):
    """Per-example negative log softmax probability of the label, [B]."""
    labels = _check_labels(logits, labels)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    out = lse - z[np.arange(z.shape[0]), labels]

    def bw(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(z.shape[0]), labels] -= 1.0
        return (p * g[:, None],)

    return Tensor._make(out, (logits,), bw, "cross_entropy_each")


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    return tmean(cross_entropy_each(logits, labels))


# -- shape and reduction ops ---------------------------------------------------


def reshape(x, shape):
    old = x.data.shape

    def bw(g):
        return (g.reshape(old),)

    return Tensor._make(x.data.reshape(shape), (x,), bw, "reshape")


def flatten(x):
    """Collapse all but the batch dimension."""
    return reshape(x, (x.data.shape[0], -1))


def narrow(x, axis, start, length):
    """Slice `length` entries from `start` along `axis`."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return Tensor._make(x.data[idx].copy(), (x,), bw, "narrow")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        idx = [slice(None)] * g.ndim
        for k in range(len(tensors)):
            idx[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return Tensor._make(out, tuple(tensors), bw, "concat")


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), bw, "sum")


def tmean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def tabs(x):
    """Elementwise absolute value with subgradient 0 at 0."""
    s = np.sign(x.data)

    def bw(g):
        return (g * s,)

    return Tensor._make(np.abs(x.data), (x,), bw, "abs")


def tsqrt(x):
    """Elementwise square root; the gradient is taken as 0 at 0."""
    out = np.sqrt(np.maximum(x.data, 0.0))

    def bw(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, 0.5 * g / safe, 0.0),)

    return Tensor._make(out, (x,), bw, "sqrt")


def amax(x, axis):
    """Max along an axis; gradient routes to the first arg-max entry."""
    idx = x.data.argmax(axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._make(out, (x,), bw, "amax")


def take_per_row(x, idx):
    """Gather one column per row: out[b] = x[b, idx[b]]."""
    idx = np.asarray(idx, dtype=np.int64)
    B = x.data.shape[0]
    rows = np.arange(B)
    out = x.data[rows, idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return Tensor._make(out, (x,), bw, "take_per_row")


def maximum_scalar(x, c):
    """Elementwise max(x, c) for a constant c; gradient flows where x > c."""
    c = float(c)
    mask = x.data > c

    def bw(g):
        return (g * mask,)

    return Tensor._make(np.maximum(x.data, c), (x,), bw, "maximum_scalar")


def reciprocal(x, eps=0.0):
    """Elementwise 1/(x + eps)."""
    denom = x.data + eps
    out = 1.0 / denom

    def bw(g):
        return (-g * out * out,)

    return Tensor._make(out, (x,), bw, "reciprocal")


def subsample(x, factor):
    """Keep every `factor`-th spatial cell of a [B,C,H,W] map (no
    averaging); spatial dims must be divisible by the factor."""
    B, C, H, W = _check_pool(x, factor, "subsample")

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, :, ::factor, ::factor] = g
        return (full,)

    return Tensor._make(np.ascontiguousarray(x.data[:, :, ::factor, ::factor]), (x,), bw, "subsample")


def upsample_nearest(x, factor):
    """Repeat each spatial cell of a [B,C,h,w] map `factor` times per axis."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    B, C, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(B, C, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), bw, "upsample_nearest")
