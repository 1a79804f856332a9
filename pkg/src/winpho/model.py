"""The windowed phoneme encoder.

Each fixed window is processed independently: a four-stage Conv1D
pyramid (13.125 ms output frames), channel gating from pooled statistics
(squeeze-excitation style), parallel temporal/spectral streams fused by
a 1x1 conv, a per-frame projection into the transformer width, and a
window-local pre-norm transformer. Two heads attach on top: a supervised
classifier over phoneme classes + blank, and a self-supervised
projection head for masked prediction.

Grouping note: the stream convolutions are grouped (g=8) by design; the
same grouping is applied to pyramid stages 2-4, which is what places the
default configuration at ~34M trainable parameters (~13M of them in the
transformer).
"""

from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import Tensor
from .errors import ShapeError
from .window import (WindowConfig, slice_clip, stitch, chain_frame_count,
                     CONV_STAGES)

CONV_GROUPS = 8


@dataclass
class ModelConfig:
    base_channels: int = 256          # n; desk scale uses 8
    model_dim: int = 512
    transformer_layers: int = 4
    heads: int = 8
    transformer_dropout: float = 0.25
    conv_dropout: float = 0.1
    classifier_dropout: float = 0.25
    head_dropout: float = 0.1         # self-supervised projection head
    num_classes: int = 65
    projection_dim: int = 256         # self-supervised feature space
    head_hidden: int = 0              # 0 -> 4 * model_dim
    freq_attention_reduction: int = 4
    window: WindowConfig = field(default_factory=WindowConfig)

    def __post_init__(self):
        if self.base_channels % CONV_GROUPS != 0:
            raise ShapeError(
                f"base_channels {self.base_channels} must be divisible by {CONV_GROUPS}")
        if self.base_channels < self.heads:
            raise ShapeError("base_channels must be at least the head count")
        if self.model_dim % self.heads != 0:
            raise ShapeError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.head_hidden == 0:
            self.head_hidden = 4 * self.model_dim

    @property
    def frames_per_window(self):
        return chain_frame_count(self.window.window_samples)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["window"] = WindowConfig(**d["window"])
        return cls(**d)


def sinusoidal_positions(frames, dim):
    pos = np.arange(frames)[:, None]
    i = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return enc


class _ConvBlock:
    """Conv + BatchNorm + GELU + dropout."""

    def __init__(self, rng, cin, cout, kernel, stride, padding, groups, dropout):
        self.conv = ly.Conv1dParams(rng, cin, cout, kernel, stride, padding, groups)
        self.bn = ly.BatchNormParams(cout)
        self.dropout = dropout

    def __call__(self, x, training, rng):
        h = ly.conv1d_forward(x, self.conv)
        h = self.bn(h, training)
        h = ad.gelu(h)
        return ad.dropout(h, self.dropout, training, rng)

    def tensors(self):
        out = [(f"conv.{k}", t) for k, t in self.conv.tensors()]
        out += [(f"bn.{k}", t) for k, t in self.bn.tensors()]
        return out

    def buffers(self):
        return [(f"bn.{k}", b) for k, b in self.bn.buffers()]


class _TransformerLayer:
    def __init__(self, rng, dim, heads, hidden, dropout):
        self.attn = ly.AttentionParams(rng, dim, heads, dropout)
        self.norm = ly.LayerNormParams(dim)
        self.ff1 = ly.LinearParams(rng, dim, hidden)
        self.ff2 = ly.LinearParams(rng, hidden, dim)
        self.dropout = dropout

    def __call__(self, x, training, rng):
        x = ly.multi_head_self_attention(x, self.attn, training, rng)
        h = self.norm(x)
        h = ad.gelu(ly.linear(h, self.ff1))
        h = ad.dropout(h, self.dropout, training, rng)
        h = ad.dropout(ly.linear(h, self.ff2), self.dropout, training, rng)
        return ad.add(x, h)

    def tensors(self):
        out = [(f"attn.{k}", t) for k, t in self.attn.tensors()]
        out += [(f"norm.{k}", t) for k, t in self.norm.tensors()]
        out += [(f"ff1.{k}", t) for k, t in self.ff1.tensors()]
        out += [(f"ff2.{k}", t) for k, t in self.ff2.tensors()]
        return out

    def buffers(self):
        return []


class Encoder:
    """Model state: all layer parameters plus running statistics.

    Parameters live in named groups so the optimizer can apply
    hierarchical learning rates and the feature extractor can be frozen
    for fine-tuning.
    """

    FEATURE_PREFIXES = ("conv1.", "conv2.", "conv3.", "conv4.", "freq_",
                        "ts1.", "ts2.", "ss1.", "ss2.", "fusion.", "projection.")

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.frozen_feature_extractor = False
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0de1]))
        n = cfg.base_channels
        d = cfg.conv_dropout

        (k1, s1, p1), (k2, s2, p2), (k3, s3, p3), (k4, s4, p4) = CONV_STAGES
        self.conv1 = _ConvBlock(rng, 1, n, k1, s1, p1, 1, d)
        self.conv2 = _ConvBlock(rng, n, 2 * n, k2, s2, p2, CONV_GROUPS, d)
        self.conv3 = _ConvBlock(rng, 2 * n, 4 * n, k3, s3, p3, CONV_GROUPS, d)
        self.conv4 = _ConvBlock(rng, 4 * n, 8 * n, k4, s4, p4, CONV_GROUPS, d)

        bottleneck = max(1, 8 * n // cfg.freq_attention_reduction)
        self.freq_reduce = ly.Conv1dParams(rng, 8 * n, bottleneck, 1)
        self.freq_expand = ly.Conv1dParams(rng, bottleneck, 8 * n, 1)

        self.ts1 = _ConvBlock(rng, 8 * n, 8 * n, 7, 1, 3, CONV_GROUPS, 0.0)
        self.ts2 = _ConvBlock(rng, 8 * n, 8 * n, 3, 1, 1, CONV_GROUPS, 0.0)
        self.ss1 = _ConvBlock(rng, 8 * n, 12 * n, 1, 1, 0, CONV_GROUPS, 0.0)
        self.ss2 = _ConvBlock(rng, 12 * n, 8 * n, 1, 1, 0, CONV_GROUPS, 0.0)
        self.fusion = _ConvBlock(rng, 16 * n, 8 * n, 1, 1, 0, 1, 0.0)

        self.projection = ly.LinearParams(rng, 8 * n, cfg.model_dim)
        self.positions = sinusoidal_positions(cfg.frames_per_window, cfg.model_dim)
        self.transformer = [
            _TransformerLayer(rng, cfg.model_dim, cfg.heads, cfg.head_hidden,
                              cfg.transformer_dropout)
            for _ in range(cfg.transformer_layers)]
        self.final_norm = ly.LayerNormParams(cfg.model_dim)

        # supervised head: model_dim -> hidden -> classes + blank
        self.cls1 = ly.LinearParams(rng, cfg.model_dim, cfg.head_hidden)
        self.cls2 = ly.LinearParams(rng, cfg.head_hidden, cfg.num_classes + 1)

        # self-supervised head: two projections with a residual skip
        self.pt_norm = ly.LayerNormParams(cfg.model_dim)
        self.pt_ff1 = ly.LinearParams(rng, cfg.model_dim, cfg.head_hidden)
        self.pt_ff2 = ly.LinearParams(rng, cfg.head_hidden, cfg.projection_dim)
        self.pt_skip = ly.LinearParams(rng, cfg.model_dim, cfg.projection_dim)
        self.has_pt_head = True

        self.mask_embedding = ad.parameter(
            rng.normal(0.0, 0.1, size=cfg.model_dim))
        # quantizer input: pre-mask features -> codebook feature space
        self.target_projection = ly.LinearParams(rng, cfg.model_dim,
                                                 cfg.projection_dim)

    # -- parameter registry -------------------------------------------------

    def _modules(self):
        mods = [("conv1", self.conv1), ("conv2", self.conv2),
                ("conv3", self.conv3), ("conv4", self.conv4),
                ("freq_reduce", self.freq_reduce), ("freq_expand", self.freq_expand),
                ("ts1", self.ts1), ("ts2", self.ts2),
                ("ss1", self.ss1), ("ss2", self.ss2), ("fusion", self.fusion),
                ("projection", self.projection)]
        for i, layer in enumerate(self.transformer):
            mods.append((f"transformer.{i}", layer))
        mods += [("final_norm", self.final_norm),
                 ("cls1", self.cls1), ("cls2", self.cls2)]
        if self.has_pt_head:
            mods += [("pt_norm", self.pt_norm), ("pt_ff1", self.pt_ff1),
                     ("pt_ff2", self.pt_ff2), ("pt_skip", self.pt_skip)]
        mods.append(("target_projection", self.target_projection))
        return mods

    def named_tensors(self):
        out = OrderedDict()
        for prefix, mod in self._modules():
            for name, t in mod.tensors():
                out[f"{prefix}.{name}"] = t
        out["mask_embedding"] = self.mask_embedding
        return out

    def named_buffers(self):
        out = OrderedDict()
        for prefix, mod in self._modules():
            for name, b in mod.buffers():
                out[f"{prefix}.{name}"] = b
        return out

    def parameter_count(self, include_pt_head=False):
        total = 0
        for name, t in self.named_tensors().items():
            if not include_pt_head and name.startswith(("pt_", "target_projection")):
                continue
            total += t.data.size
        return total

    def transformer_parameter_count(self):
        return sum(t.data.size for name, t in self.named_tensors().items()
                   if name.startswith(("transformer.", "final_norm.")))

    def is_feature_name(self, name):
        return name.startswith(self.FEATURE_PREFIXES)

    def freeze_feature_extractor(self):
        """Feature-extractor tensors stop requiring gradients and their
        batch-norm stats stop updating (the stack runs in eval mode)."""
        self.frozen_feature_extractor = True
        for name, t in self.named_tensors().items():
            if self.is_feature_name(name):
                t.requires_grad = False
                t.grad = None

    def drop_pt_head(self):
        self.has_pt_head = False

    def reset_classifier(self, seed):
        """Fresh supervised head (fine-tuning replaces the pretraining
        head with newly initialized classification layers)."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xc1a55]))
        self.cls1 = ly.LinearParams(rng, self.cfg.model_dim, self.cfg.head_hidden)
        self.cls2 = ly.LinearParams(rng, self.cfg.head_hidden, self.cfg.num_classes + 1)

    def parameter_group(self, name):
        """encoder / quantizer / head / classifier, for hierarchical LRs."""
        if name.startswith("target_projection."):
            return "quantizer"
        if name.startswith("pt_"):
            return "head"
        if name.startswith("cls"):
            return "classifier"
        return "encoder"

    # -- forward passes ------------------------------------------------------

    def stage_lengths(self, window_samples=None):
        length = window_samples or self.cfg.window.window_samples
        out = []
        for block in (self.conv1, self.conv2, self.conv3, self.conv4):
            length = block.conv.out_length(length)
            out.append(length)
        return out

    def feature_frames(self, windows, training=False, rng=None, shape_log=None):
        """Conv pyramid + gating + streams + fusion + projection:
        [N, W] or [N, 1, W] samples -> [N, F_w, model_dim] frame features."""
        x = ad.as_tensor(windows)
        if x.data.ndim == 2:
            x = ad.reshape(x, (x.data.shape[0], 1, x.data.shape[1]))
        if x.data.ndim != 3 or x.data.shape[1] != 1:
            raise ShapeError(f"expected [N, 1, W] windows, got {x.data.shape}")
        if x.data.shape[2] != self.cfg.window.window_samples:
            raise ShapeError(
                f"window length {x.data.shape[2]} does not match configured "
                f"{self.cfg.window.window_samples}")
        feat_training = training and not self.frozen_feature_extractor

        h = self.conv1(x, feat_training, rng)
        if shape_log is not None:
            shape_log.append(h.data.shape)
        h = self.conv2(h, feat_training, rng)
        if shape_log is not None:
            shape_log.append(h.data.shape)
        h = self.conv3(h, feat_training, rng)
        if shape_log is not None:
            shape_log.append(h.data.shape)
        h = self.conv4(h, feat_training, rng)
        if shape_log is not None:
            shape_log.append(h.data.shape)

        # channel gates from pooled frames: AvgPool + Conv1D + Sigmoid
        pooled = ad.tmean(h, axis=2, keepdims=True)
        gates = ly.conv1d_forward(pooled, self.freq_reduce)
        gates = ad.gelu(gates)
        gates = ad.sigmoid(ly.conv1d_forward(gates, self.freq_expand))
        h = ad.mul(h, gates)

        ts = self.ts1(h, feat_training, rng)
        ts = self.ts2(ts, feat_training, rng)
        ss = self.ss1(h, feat_training, rng)
        ss = self.ss2(ss, feat_training, rng)
        fused = self.fusion(ad.concat([ts, ss], axis=1), feat_training, rng)

        frames = ad.transpose(fused, (0, 2, 1))     # [N, F_w, 8n]
        return ly.linear(frames, self.projection)

    def contextualize(self, feats, training=False, rng=None, mask_matrix=None):
        """Window-local transformer over frame features; ``mask_matrix``
        ([N, F_w] of 0/1) swaps masked frames for the learned embedding
        before positions are added."""
        if mask_matrix is not None:
            m = ad.constant(mask_matrix[:, :, None].astype(np.float64))
            keep = ad.mul(feats, ad.constant(1.0 - m.data))
            fill = ad.mul(ad.reshape(self.mask_embedding, (1, 1, -1)), m)
            feats = ad.add(keep, fill)
        h = ad.add(feats, ad.constant(self.positions[None, :, :]))
        for layer in self.transformer:
            h = layer(h, training, rng)
        return self.final_norm(h)

    def encode_window(self, windows, training=False, rng=None, shape_log=None,
                      mask_matrix=None):
        feats = self.feature_frames(windows, training, rng, shape_log)
        return self.contextualize(feats, training, rng, mask_matrix)

    def classify(self, embeddings, training=False, rng=None):
        """Supervised head: logits over num_classes phoneme classes plus a
        final blank column (blank id = num_classes)."""
        h = ad.gelu(ly.linear(embeddings, self.cls1))
        h = ad.dropout(h, self.cfg.classifier_dropout, training, rng)
        return ly.linear(h, self.cls2)

    def project(self, embeddings, training=False, rng=None):
        """Self-supervised head into the quantizer feature space."""
        if not self.has_pt_head:
            raise ShapeError("projection head was dropped from this model")
        h = self.pt_norm(embeddings)
        a = ad.gelu(ly.linear(h, self.pt_ff1))
        a = ad.dropout(a, self.cfg.head_dropout, training, rng)
        return ad.add(ly.linear(a, self.pt_ff2), ly.linear(embeddings, self.pt_skip))

    def quantizer_features(self, feats):
        """Pre-mask frame features mapped into the codebook space; the
        feature extractor is detached so target gradients stop at the
        quantizer input projection."""
        return ly.linear(feats.detach(), self.target_projection)

    def forward_clip(self, samples, training=False, rng=None):
        """slice -> encode -> classify -> softmax -> stitch, eval mode by
        default. Returns (StitchedPosteriors, WindowBatch)."""
        batch = slice_clip(samples, self.cfg.window)
        emb = self.encode_window(batch.windows, training, rng)
        logits = self.classify(emb, training, rng)
        probs = ad.softmax(logits, axis=-1)
        _, posts = stitch(ad.constant(probs.data), batch, self.cfg.window)
        return posts, batch

    # -- dtype / misc ---------------------------------------------------------

    def cast(self, dtype):
        """Cast parameters and running stats (float32 inference mode)."""
        for t in self.named_tensors().values():
            t.data = t.data.astype(dtype)
        for name, b in self.named_buffers().items():
            b[:] = b.astype(dtype)
        return self


def build(cfg: ModelConfig, seed=0):
    return Encoder(cfg, seed)
