"""Dense arrays with reverse-mode differentiation over a small fixed op set.

Only the operations the backbone and the debiasing path need are defined.
There is no implicit broadcasting: every op states the shapes it accepts.
"""

from __future__ import annotations

import numpy as np

from . import kernels

DTYPE = np.float32


class Tensor:
    """A dense array node in a computation graph.

    ``data`` is a C-contiguous numpy array; ``grad`` is allocated lazily during
    :meth:`backward` and always has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, scalar):
        return scale(self, scalar)

    __rmul__ = __mul__

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else None)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a, s):
    s = float(s)
    return _node(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def elementwise_mul(a, b):
    """Hadamard product of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("elementwise_mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def slice_rows(a, start, stop):
    """Rows ``start:stop`` along the leading axis."""
    full = a.shape

    def backward(g):
        out = np.zeros(full, dtype=g.dtype)
        out[start:stop] = g
        return (out,)

    return _node(a.data[start:stop], (a,), backward)


def relu(a):
    out = np.maximum(a.data, a.dtype.type(0))
    return _node(out, (a,), lambda g: (g * (out > 0),))


# ---------------------------------------------------------------- layers

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of an NCHW input with an OIKK weight (square kernels)."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be NCHW, got {x.data.ndim} dims")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be OIKK, got {weight.data.ndim} dims")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: channel dimension mismatch, input has {c}, weight expects {ci}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if h + 2 * padding < kh:
        raise ValueError(f"conv2d: height {h} with padding {padding} is smaller than kernel height {kh}")
    if w + 2 * padding < kw:
        raise ValueError(f"conv2d: width {w} with padding {padding} is smaller than kernel width {kw}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias must have shape ({o},), got {bias.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.col2im(gmat @ wmat, (n, c, h, w), kh, kw, stride, padding)
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape (N, D) and ``weight`` (K, D)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out = out + bias.data
    xd, wd = x.data, weight.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def global_avg_pool(x):
    """Mean over the spatial extent: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: expected NCHW, got shape {x.shape}")
    shape = x.shape
    area = shape[2] * shape[3]

    def backward(g):
        return (np.broadcast_to((g / g.dtype.type(area))[:, :, None, None], shape).copy(),)

    return _node(x.data.mean(axis=(2, 3), dtype=x.dtype), (x,), backward)


def upsample_nearest(x, size):
    """Nearest-neighbour upsampling with floor index mapping.

    ``out[..., i, j] = x[..., floor(i*h'/h), floor(j*w'/w)]``. Accepts (C, h', w')
    or (N, C, h', w') inputs.
    """
    h, w = size
    hs, ws = x.shape[-2], x.shape[-1]
    if h < hs or w < ws:
        raise ValueError(f"upsample_nearest: target {(h, w)} is smaller than source {(hs, ws)}")
    ri = (np.arange(h) * hs) // h
    rj = (np.arange(w) * ws) // w
    out = x.data[..., ri[:, None], rj[None, :]]
    src_shape = x.shape

    def backward(g):
        flat = g.reshape(-1, h * w)
        idx = (ri[:, None] * ws + rj[None, :]).reshape(-1)
        acc = np.zeros((flat.shape[0], hs * ws), dtype=g.dtype)
        np.add.at(acc, (slice(None), idx), flat)
        return (acc.reshape(src_shape),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------- losses

def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy of (N, K) logits against integer class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"softmax_cross_entropy: class index out of range [0, {k})")
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(n), targets].mean(dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1
        return (p * (g / g.dtype.type(n)),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def per_sample_cross_entropy(logits, targets):
    """Cross-entropy of each row, no graph (used for measurement only)."""
    logp = _log_softmax(np.asarray(logits))
    return -logp[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)]


def mse(pred, target):
    """Mean squared error against a constant target of the same shape."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    size = diff.size

    def backward(g):
        return (diff * (2 * g / g.dtype.type(size)),)

    return _node(np.asarray((diff * diff).mean(dtype=pred.dtype)), (pred,), backward)
