"""Reverse-mode automatic differentiation over numpy arrays.

Every operation that sees a tensor requiring gradients records a backward
closure on its output; calling ``backward(loss)`` walks the recorded graph
in reverse topological order and accumulates gradients into the leaves.
The graph lives only as long as the output tensors, so each training step
builds and drops its own tape. There is no global recording state.

Training and gradient checks run in float64; callers may cast parameters
to float32 for inference.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .errors import ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """N-d float array with an optional gradient buffer.

    ``grad`` is populated by ``backward`` and always matches ``data``'s
    shape. Values are treated as immutable once produced by an op.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=()):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        # Rebinding (never in-place) keeps shared buffers safe.
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """Tensor that never records gradients."""
    return Tensor(x)


def parameter(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def backward(root, seed_grad=None):
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    ``root`` is typically a scalar loss; for non-scalar roots a
    ``seed_grad`` of matching shape must be given.
    """
    if seed_grad is None:
        if root.data.size != 1:
            raise ShapeError("backward on non-scalar output requires seed_grad")
        seed_grad = np.ones_like(root.data)
    root.grad = np.asarray(seed_grad, dtype=root.data.dtype)

    # Iterative postorder toposort; graphs can be a few thousand nodes deep.
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _record(out_data, parents, make_bwd):
    """Build the output tensor, attaching a backward closure when needed."""
    if any(p.requires_grad for p in parents):
        out = Tensor(out_data, requires_grad=True, _parents=tuple(parents))
        out._backward = make_bwd()
        return out
    return Tensor(out_data)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def make_bwd():
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))
        return bwd

    return _record(out_data, (a, b), make_bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def make_bwd():
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.data.shape))
        return bwd

    return _record(out_data, (a, b), make_bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def make_bwd():
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))
        return bwd

    return _record(out_data, (a, b), make_bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def make_bwd():
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        return bwd

    return _record(out_data, (a, b), make_bwd)


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    out_data = a.data ** exponent

    def make_bwd():
        def bwd(g):
            a._accum(g * exponent * a.data ** (exponent - 1.0))
        return bwd

    return _record(out_data, (a,), make_bwd)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def make_bwd():
        def bwd(g):
            a._accum(g * out_data)
        return bwd

    return _record(out_data, (a,), make_bwd)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def make_bwd():
        def bwd(g):
            a._accum(g / a.data)
        return bwd

    return _record(out_data, (a,), make_bwd)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def make_bwd():
        def bwd(g):
            a._accum(g * out_data * (1.0 - out_data))
        return bwd

    return _record(out_data, (a,), make_bwd)


def gelu(a):
    """Exact (erf-based) GELU: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * phi_cdf

    def make_bwd():
        def bwd(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a._accum(g * (phi_cdf + x * pdf))
        return bwd

    return _record(out_data, (a,), make_bwd)


# -- shape manipulation ---------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    if isinstance(shape, (list, tuple)) and len(shape) == 1 and isinstance(shape[0], (list, tuple)):
        shape = shape[0]
    out_data = a.data.reshape(shape)

    def make_bwd():
        def bwd(g):
            a._accum(g.reshape(a.data.shape))
        return bwd

    return _record(out_data, (a,), make_bwd)


def transpose(a, axes):
    a = as_tensor(a)
    out_data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def make_bwd():
        def bwd(g):
            a._accum(g.transpose(inv))
        return bwd

    return _record(out_data, (a,), make_bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_bwd():
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t._accum(g[tuple(idx)])
        return bwd

    return _record(out_data, tuple(tensors), make_bwd)


def getitem(a, idx):
    a = as_tensor(a)
    out_data = a.data[idx]

    def make_bwd():
        def bwd(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accum(buf)
        return bwd

    return _record(out_data, (a,), make_bwd)


# -- reductions ------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def make_bwd():
        def bwd(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(gg, a.data.shape).copy())
        return bwd

    return _record(out_data, (a,), make_bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def make_bwd():
        def bwd(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accum(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accum(_unbroadcast(gb, b.data.shape))
        return bwd

    return _record(out_data, (a, b), make_bwd)


# -- softmax family ----------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def make_bwd():
        def bwd(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accum((g - dot) * out_data)
        return bwd

    return _record(out_data, (a,), make_bwd)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def make_bwd():
        def bwd(g):
            a._accum(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))
        return bwd

    return _record(out_data, (a,), make_bwd)


# -- convolution -------------------------------------------------------------

def conv1d_out_length(length, kernel, stride, padding):
    return (length + 2 * padding - kernel) // stride + 1


def _im2col(xp, kernel, stride, L_out):
    """View of shape (B, C, L_out, kernel) over the padded signal."""
    s0, s1, s2 = xp.strides
    return as_strided(xp, shape=(xp.shape[0], xp.shape[1], L_out, kernel),
                      strides=(s0, s1, s2 * stride, s2))


def conv1d(x, w, b, stride=1, padding=0, groups=1):
    """Grouped 1-d convolution (cross-correlation) of [B, C_in, L] inputs.

    ``w`` has shape (C_out, C_in // groups, kernel); channels never mix
    across groups.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d input must be 3-d [B, C, L], got {x.data.shape}")
    B, Cin, L = x.data.shape
    Cout, Cin_g, kernel = w.data.shape
    if Cin % groups != 0:
        raise ShapeError(f"in_channels {Cin} not divisible by groups {groups}")
    if Cout % groups != 0:
        raise ShapeError(f"out_channels {Cout} not divisible by groups {groups}")
    if Cin_g != Cin // groups:
        raise ShapeError(
            f"weight expects {Cin_g} input channels per group, input has {Cin // groups}")
    if b.data.shape != (Cout,):
        raise ShapeError(f"bias must have shape ({Cout},), got {b.data.shape}")
    if L + 2 * padding < kernel:
        raise ShapeError(
            f"padded length {L + 2 * padding} shorter than kernel {kernel}")

    L_out = conv1d_out_length(L, kernel, stride, padding)
    Cout_g = Cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kernel, stride, L_out)
    # (groups, B*L_out, Cin_g*kernel) so each group is one BLAS matmul
    cols_g = cols.reshape(B, groups, Cin_g, L_out, kernel)
    cols2 = cols_g.transpose(1, 0, 3, 2, 4).reshape(groups, B * L_out, Cin_g * kernel)
    w2 = w.data.reshape(groups, Cout_g, Cin_g * kernel)
    out_g = cols2 @ w2.transpose(0, 2, 1)
    out_data = out_g.reshape(groups, B, L_out, Cout_g).transpose(1, 0, 3, 2) \
                    .reshape(B, Cout, L_out) + b.data[None, :, None]

    def make_bwd():
        def bwd(g):
            g_g = g.reshape(B, groups, Cout_g, L_out).transpose(1, 0, 3, 2) \
                   .reshape(groups, B * L_out, Cout_g)
            if w.requires_grad:
                gw = g_g.transpose(0, 2, 1) @ cols2
                w._accum(gw.reshape(w.data.shape))
            if b.requires_grad:
                b._accum(g.sum(axis=(0, 2)))
            if x.requires_grad:
                gcols = (g_g @ w2).reshape(groups, B, L_out, Cin_g, kernel) \
                                  .transpose(1, 0, 3, 2, 4).reshape(B, Cin, L_out, kernel)
                gxp = np.zeros((B, Cin, L + 2 * padding), dtype=x.data.dtype)
                for j in range(kernel):
                    gxp[:, :, j:j + stride * L_out:stride] += gcols[:, :, :, j]
                x._accum(gxp[:, :, padding:padding + L] if padding else gxp)
        return bwd

    return _record(out_data, (x, w, b), make_bwd)


# -- normalization -------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch normalization for [B, C] or [B, C, L] inputs.

    ``running_mean``/``running_var`` are plain numpy buffers, updated in
    place in training mode (side effect, not part of the gradient graph).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim == 2:
        red_axes, shape = (0,), (1, -1)
    elif x.data.ndim == 3:
        red_axes, shape = (0, 2), (1, -1, 1)
    else:
        raise ShapeError(f"batch_norm expects 2-d or 3-d input, got {x.data.shape}")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")

    if training:
        if x.data.shape[0] == 1:
            raise ShapeError("batch_norm: batch size 1 has undefined variance in training mode")
        count = np.prod([x.data.shape[ax] for ax in red_axes])
        mean = x.data.mean(axis=red_axes)
        var = x.data.var(axis=red_axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        count = None
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out_data = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    def make_bwd():
        def bwd(g):
            if gamma.requires_grad:
                gamma._accum((g * x_hat).sum(axis=red_axes))
            if beta.requires_grad:
                beta._accum(g.sum(axis=red_axes))
            if x.requires_grad:
                gx_hat = g * gamma.data.reshape(shape)
                if training:
                    m1 = gx_hat.mean(axis=red_axes).reshape(shape)
                    m2 = (gx_hat * x_hat).mean(axis=red_axes).reshape(shape)
                    x._accum(inv_std.reshape(shape) * (gx_hat - m1 - x_hat * m2))
                else:
                    x._accum(gx_hat * inv_std.reshape(shape))
        return bwd

    return _record(out_data, (x, gamma, beta), make_bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalization over the last axis with learned affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.data.shape[-1]
    if gamma.data.shape != (D,) or beta.data.shape != (D,):
        raise ShapeError(f"layer_norm gamma/beta must have shape ({D},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std
    out_data = gamma.data * x_hat + beta.data

    def make_bwd():
        def bwd(g):
            if gamma.requires_grad:
                gamma._accum((g * x_hat).reshape(-1, D).sum(axis=0))
            if beta.requires_grad:
                beta._accum(g.reshape(-1, D).sum(axis=0))
            if x.requires_grad:
                gx_hat = g * gamma.data
                m1 = gx_hat.mean(axis=-1, keepdims=True)
                m2 = (gx_hat * x_hat).mean(axis=-1, keepdims=True)
                x._accum(inv_std * (gx_hat - m1 - x_hat * m2))
        return bwd

    return _record(out_data, (x, gamma, beta), make_bwd)


# -- regularization -------------------------------------------------------------

def dropout(x, rate, training, rng=None):
    """Inverted dropout; identity when not training or rate == 0."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, constant(mask.astype(x.data.dtype)))
