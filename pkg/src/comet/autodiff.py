"""Dense float64 tensors with reverse-mode differentiation and Adam.

Small on purpose: just the primitives the network needs, each with a
finite-difference-checked backward rule. Tapes are per-thread-unsafe;
run independent tapes in independent computations.
"""

from __future__ import annotations

import struct

import numpy as np


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    # reduce gradient g back to `shape` after numpy broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad, b.shape))

    return _result(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.shape))

    return _result(data, (a, b), backward)


def scale(a, s):
    a = as_tensor(a)
    s = float(s)

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad * s)

    return _result(a.data * s, (a,), backward)


def neg(a):
    return scale(a, -1.0)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ out.grad)

    return _result(data, (a, b), backward)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad.T)

    return _result(a.data.T, (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad.reshape(old))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                p._accum(out.grad[tuple(idx)])

    return _result(data, tuple(parts), backward)


def slice_cols(a, start, stop):
    a = as_tensor(a)

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[..., start:stop] = out.grad
            a._accum(g)

    return _result(a.data[..., start:stop], (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape).copy())

    return _result(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.shape[axis]

    def backward(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape) / n)

    return _result(data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad * data * (1.0 - data))

    return _result(data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad * (1.0 - data * data))

    return _result(data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad * mask)

    return _result(a.data * mask, (a,), backward)


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, slope * a.data)

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad * np.where(mask, 1.0, slope))

    return _result(data, (a,), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(out):
        if a.requires_grad:
            dot = (out.grad * data).sum(axis=axis, keepdims=True)
            a._accum(data * (out.grad - dot))

    return _result(data, (a,), backward)


def log(a):
    a = as_tensor(a)

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad / a.data)

    return _result(np.log(a.data), (a,), backward)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad * data)

    return _result(data, (a,), backward)


def dropout(a, rate, rng=None, mask=None):
    """Inverted dropout: kept units scaled by 1/(1-rate) at train time."""
    a = as_tensor(a)
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mask is None:
        mask = (rng.random(a.shape) >= rate).astype(np.float64)
    keep = mask / (1.0 - rate)

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad * keep)

    return _result(a.data * keep, (a,), backward)


def gather(a, idx):
    """Row lookup (embedding lookup); backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accum(g)

    return _result(a.data[idx], (a,), backward)


def segment_sum(a, seg_ids, num_segments):
    """Sum rows of `a` into `num_segments` buckets given per-row bucket ids."""
    a = as_tensor(a)
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    data = np.zeros((num_segments,) + a.shape[1:], dtype=np.float64)
    np.add.at(data, seg_ids, a.data)

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad[seg_ids])

    return _result(data, (a,), backward)


def segment_softmax(scores, seg_ids, num_segments):
    """Softmax over groups of rows; `scores` has shape (E, 1)."""
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    # max per segment is detached, standard for numerical stability
    seg_max = np.full((num_segments, 1), -np.inf)
    np.maximum.at(seg_max, seg_ids, scores.data)
    shifted = sub(scores, Tensor(seg_max[seg_ids]))
    e = exp(shifted)
    denom = segment_sum(e, seg_ids, num_segments)
    return t_div(e, gather(denom, seg_ids))


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    n = a.shape[-1]

    def backward(out):
        if gain.requires_grad:
            gain._accum(_unbroadcast(out.grad * xhat, gain.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(out.grad, bias.shape))
        if a.requires_grad:
            gy = out.grad * gain.data
            t1 = gy.sum(axis=-1, keepdims=True)
            t2 = (gy * xhat).sum(axis=-1, keepdims=True)
            a._accum(inv * (gy - t1 / n - xhat * t2 / n))

    return _result(data, (a, gain, bias), backward)


def softplus(a):
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def backward(out):
        if a.requires_grad:
            a._accum(out.grad / (1.0 + np.exp(-a.data)))

    return _result(data, (a,), backward)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on raw logits; targets are 0/1 constants."""
    t = as_tensor(targets)
    return tmean(sub(softplus(logits), mul(t, logits)))


def mse_loss(pred, targets):
    d = sub(pred, as_tensor(targets))
    return tmean(mul(d, d))


def t_div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward)


def backward(loss):
    """Populate gradients of every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._backward is not None:
                stack.append((p, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1 ** self.t)
            v_hat = self.v[k] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


_CKPT_MAGIC = b"COMETCK1"


def _write_array(f, name, arr):
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(f):
    (nlen,) = struct.unpack("<H", f.read(2))
    name = f.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
    return name, arr


def save_checkpoint(path, params, moments=None):
    """Flat (name, shape, values) file; little-endian, byte-stable."""
    moments = moments or {}
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            _write_array(f, name, params[name].data)
        f.write(struct.pack("<I", len(moments)))
        for name in sorted(moments):
            _write_array(f, name, moments[name])


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (n,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(n):
            name, arr = _read_array(f)
            params[name] = Tensor(arr, requires_grad=True)
        (n,) = struct.unpack("<I", f.read(4))
        moments = {}
        for _ in range(n):
            name, arr = _read_array(f)
            moments[name] = arr
        return params, moments
