"""Slicing raw waveforms into fixed overlapping windows and stitching
per-window frame probabilities back onto the global frame grid.

The default geometry is 120 ms windows (1920 samples at 16 kHz) with an
80 ms stride (1280 samples). Four convolution stages with strides
7*5*3*2 = 210 put one output frame every 13.125 ms, ten frames per
120 ms window.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

SAMPLE_RATE = 16000
FRAME_HOP = 210  # samples per output frame: product of conv strides 7*5*3*2

# (kernel, stride, padding) of the four feature-extractor stages; the
# frame count of a window is this chain applied to its sample count.
CONV_STAGES = ((15, 7, 7), (11, 5, 5), (7, 3, 3), (5, 2, 2))

WEIGHT_FLOOR = 1e-6  # keeps edge frames representable where the raw cosine is 0
STITCH_EPS = 1e-8


def chain_frame_count(window_samples):
    """Frame count after the four conv stages, for a window of given length."""
    length = window_samples
    for kernel, stride, padding in CONV_STAGES:
        length = (length + 2 * padding - kernel) // stride + 1
    return length


@dataclass
class WindowConfig:
    sample_rate: int = SAMPLE_RATE
    window_samples: int = 1920   # 120 ms
    stride_samples: int = 1280   # 80 ms
    frame_hop_samples: int = FRAME_HOP

    def __post_init__(self):
        if self.stride_samples > self.window_samples:
            raise ValueError(
                f"stride {self.stride_samples} exceeds window {self.window_samples}")
        if self.stride_samples <= 0:
            raise ValueError("stride must be positive")

    @property
    def frames_per_window(self):
        return chain_frame_count(self.window_samples)


def frames_per_window(cfg: WindowConfig):
    return cfg.frames_per_window


@dataclass
class WindowBatch:
    """Overlapping windows of one clip plus their global sample offsets."""
    windows: Tensor            # [N, W]
    offsets: list              # global sample offset of each window (i * stride)
    source_length: int         # samples before padding
    pad_amount: int            # zeros appended to cover the tail

    @property
    def count(self):
        return self.windows.data.shape[0]


def slice_clip(audio, cfg: WindowConfig):
    """Cut a mono waveform into overlapping windows, window i reading
    samples [i*stride, i*stride + W).

    Audio shorter than one window is right-zero-padded to exactly W;
    a trailing partial window is covered by padding up to the last
    window's end. Zero padding reads as silence downstream.
    """
    samples = audio.data if isinstance(audio, Tensor) else np.asarray(audio, dtype=np.float64)
    if samples.ndim != 1:
        raise ShapeError(f"slice_clip expects mono 1-d audio, got shape {samples.shape}")
    T = samples.shape[0]
    if T == 0:
        raise ShapeError("cannot slice empty audio")
    W, s = cfg.window_samples, cfg.stride_samples

    if T <= W:
        n = 1
    else:
        n = int(np.ceil((T - W) / s)) + 1
    padded_len = (n - 1) * s + W
    pad = padded_len - T
    if pad:
        samples = np.concatenate([samples, np.zeros(pad, dtype=samples.dtype)])

    offsets = [i * s for i in range(n)]
    idx = np.arange(W)[None, :] + np.array(offsets)[:, None]
    return WindowBatch(windows=Tensor(samples[idx]), offsets=offsets,
                       source_length=T, pad_amount=pad)


def cosine_weight(t, frames):
    """Stitching weight of local frame t in a window of ``frames`` frames:
    cos(pi*t/F - pi/2) = sin(pi*t/F), floored at 1e-6 so edge frames of a
    lone window are not discarded."""
    w = np.cos(np.pi * np.asarray(t, dtype=np.float64) / frames - np.pi / 2.0)
    return np.maximum(w, WEIGHT_FLOOR)


def global_frame_index(window_index, local_frame, cfg: WindowConfig):
    """Nearest-integer global frame for local frame t of window k. The
    stride is not an integer number of hops, so deposits are bucketed."""
    pos = window_index * cfg.stride_samples + local_frame * cfg.frame_hop_samples
    return int(round(pos / cfg.frame_hop_samples))


@dataclass
class StitchedPosteriors:
    """Class probabilities on the global frame grid."""
    frames: np.ndarray          # [T_f, C+1], each row sums to 1
    frame_hop: float            # seconds between frames
    weight_mass: np.ndarray     # [T_f] accumulated cosine weight per frame

    @property
    def count(self):
        return self.frames.shape[0]

    def times(self):
        return np.arange(self.count) * self.frame_hop


def stitch_matrix(batch: WindowBatch, cfg: WindowConfig, frames: int):
    """Sparse-as-dense deposit map A [T_f, N*F_w] with A[g, k*F_w+t] the
    normalized cosine weight of window k's frame t at global frame g.

    Rows sum to Sum(w) / (Sum(w) + eps); callers renormalize after the
    weighted average. Also returns the per-frame raw weight mass.
    """
    n = batch.count
    if n == 0:
        raise ShapeError("cannot stitch an empty window batch")
    weights = cosine_weight(np.arange(frames), frames)

    cap = int(np.ceil(batch.source_length / cfg.frame_hop_samples))
    deposits = []  # (g, window, local_frame)
    g_max = -1
    for k in range(n):
        for t in range(frames):
            g = global_frame_index(k, t, cfg)
            if g < cap:
                deposits.append((g, k, t))
                g_max = max(g_max, g)
    total = g_max + 1

    mass = np.zeros(total)
    for g, k, t in deposits:
        mass[g] += weights[t]
    if np.any(mass <= 0.0):
        raise ShapeError("stitching left a frame with no contributing window")

    mat = np.zeros((total, n * frames))
    for g, k, t in deposits:
        mat[g, k * frames + t] = weights[t] / (mass[g] + STITCH_EPS)
    return mat, mass


def stitch(per_window, batch: WindowBatch, cfg: WindowConfig, renormalize=True):
    """Cosine-weighted fusion of per-window probabilities [N, F_w, C+1]
    onto the global frame grid, renormalized to row-stochastic.

    ``per_window`` may be a plain array or a graph tensor; in the latter
    case the stitched output stays on the tape (the deposit map is linear
    and the renormalization differentiable). ``renormalize=False`` yields
    the bare weighted average, which is also meaningful for raw logits.
    """
    pw = ad.as_tensor(per_window)
    n, frames, classes = pw.data.shape
    if n != batch.count:
        raise ShapeError(f"got {n} windows of posteriors for {batch.count} windows")
    mat, mass = stitch_matrix(batch, cfg, frames)

    flat = ad.reshape(pw, (n * frames, classes))
    raw = ad.matmul(ad.constant(mat), flat)
    if renormalize:
        row_sums = ad.tsum(raw, axis=1, keepdims=True)
        frames_t = ad.div(raw, row_sums)
    else:
        frames_t = raw
    return frames_t, StitchedPosteriors(
        frames=frames_t.data,
        frame_hop=cfg.frame_hop_samples / cfg.sample_rate,
        weight_mass=mass,
    )


def stitch_probs(per_window, batch: WindowBatch, cfg: WindowConfig):
    """Array-only variant of :func:`stitch` for inference paths."""
    _, posts = stitch(ad.constant(np.asarray(per_window)), batch, cfg)
    return posts
