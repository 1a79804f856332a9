"""Parameterized layers built on the autodiff primitives.

Each ``*Params`` container owns its weight tensors plus any running
buffers, and exposes ``tensors()``/``buffers()`` for checkpointing and
optimizer registration.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def _normal(rng, shape, std):
    return ad.parameter(rng.normal(0.0, std, size=shape))


def _zeros(shape):
    return ad.parameter(np.zeros(shape))


def _ones(shape):
    return ad.parameter(np.ones(shape))


class Conv1dParams:
    """Grouped conv weights plus the (kernel, stride, padding) geometry."""

    def __init__(self, rng, in_channels, out_channels, kernel, stride=1,
                 padding=0, groups=1):
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"channels ({in_channels} -> {out_channels}) not divisible by groups {groups}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel
        self.weight = _normal(rng, (out_channels, in_channels // groups, kernel),
                              np.sqrt(2.0 / fan_in))
        self.bias = _zeros(out_channels)

    def out_length(self, length):
        return ad.conv1d_out_length(length, self.kernel, self.stride, self.padding)

    def tensors(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        return []


def conv1d_forward(x, p: Conv1dParams):
    if x.data.shape[1] != p.in_channels:
        raise ShapeError(
            f"conv1d expects {p.in_channels} input channels, got {x.data.shape[1]}")
    return ad.conv1d(x, p.weight, p.bias, stride=p.stride, padding=p.padding,
                     groups=p.groups)


class BatchNormParams:
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = _ones(channels)
        self.beta = _zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training,
                             momentum=self.momentum, eps=self.eps)

    def tensors(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class LayerNormParams:
    def __init__(self, dim, eps=1e-5):
        self.gamma = _ones(dim)
        self.beta = _zeros(dim)
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def tensors(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return []


class LinearParams:
    def __init__(self, rng, in_dim, out_dim):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = _normal(rng, (in_dim, out_dim), np.sqrt(1.0 / in_dim))
        self.bias = _zeros(out_dim)

    def tensors(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        return []


def linear(x, p: LinearParams):
    if x.data.shape[-1] != p.in_dim:
        raise ShapeError(f"linear expects last dim {p.in_dim}, got {x.data.shape[-1]}")
    return ad.add(ad.matmul(x, p.weight), p.bias)


class AttentionParams:
    """Pre-norm multi-head self-attention block for [B, F, D] inputs."""

    def __init__(self, rng, model_dim=512, heads=8, dropout_rate=0.25):
        if model_dim % heads != 0:
            raise ShapeError(f"model_dim {model_dim} not divisible by heads {heads}")
        self.model_dim = model_dim
        self.heads = heads
        self.head_dim = model_dim // heads
        self.dropout_rate = dropout_rate
        self.norm = LayerNormParams(model_dim)
        self.wq = LinearParams(rng, model_dim, model_dim)
        self.wk = LinearParams(rng, model_dim, model_dim)
        self.wv = LinearParams(rng, model_dim, model_dim)
        self.wo = LinearParams(rng, model_dim, model_dim)

    def tensors(self):
        out = []
        for name, sub in [("norm", self.norm), ("wq", self.wq), ("wk", self.wk),
                          ("wv", self.wv), ("wo", self.wo)]:
            out.extend((f"{name}.{k}", t) for k, t in sub.tensors())
        return out

    def buffers(self):
        return []


def multi_head_self_attention(x, p: AttentionParams, training=False, rng=None,
                              return_weights=False):
    """Pre-norm residual attention: x + Wo(attend(norm(x))).

    Context never crosses the frame axis boundary — each [B] row attends
    only within its own F frames. Attention rows are a probability
    distribution before dropout.
    """
    B, F, D = x.data.shape
    if F == 0:
        raise ShapeError("attention requires at least one frame")
    if D != p.model_dim:
        raise ShapeError(f"attention expects model_dim {p.model_dim}, got {D}")
    H, Dh = p.heads, p.head_dim

    h = p.norm(x)
    q = ad.reshape(linear(h, p.wq), (B, F, H, Dh)).transpose((0, 2, 1, 3))
    k = ad.reshape(linear(h, p.wk), (B, F, H, Dh)).transpose((0, 2, 1, 3))
    v = ad.reshape(linear(h, p.wv), (B, F, H, Dh)).transpose((0, 2, 1, 3))

    scores = ad.mul(ad.matmul(q, k.transpose((0, 1, 3, 2))), 1.0 / np.sqrt(Dh))
    weights = ad.softmax(scores, axis=-1)
    attn = ad.dropout(weights, p.dropout_rate, training, rng)
    ctx = ad.matmul(attn, v)
    merged = ad.reshape(ctx.transpose((0, 2, 1, 3)), (B, F, D))
    out = ad.dropout(linear(merged, p.wo), p.dropout_rate, training, rng)
    res = ad.add(x, out)
    if return_weights:
        return res, weights
    return res


def grad_check(op, inputs, epsilon=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps the input tensors to a tensor; the check probes a fixed
    non-uniform weighting of its output (a plain sum is blind to ops with
    constant row sums, e.g. softmax). Inputs must be float64.
    """
    inputs = [ad.as_tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = op(*inputs)
    probe = np.cos(0.7 * np.arange(out.data.size)).reshape(out.data.shape) + 0.3
    loss = ad.tsum(ad.mul(out, ad.constant(probe)))
    ad.backward(loss)

    def f():
        return float((op(*inputs).data * probe).sum())

    max_err = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = f()
            flat[i] = orig - epsilon
            f_minus = f()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    return max_err
