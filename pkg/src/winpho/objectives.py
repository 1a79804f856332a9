"""Training objectives: CTC with a silence-awareness term for supervised
runs, and masking + vector quantization + the four-part masked-prediction
loss for self-supervised pretraining.

CTC runs the standard extended-label forward-backward recursion in log
space with an analytic gradient (occupancy posteriors) injected into the
gradient graph, rather than differentiating through the recursion.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import frame_rms
from .errors import InfeasibleTargetError, ShapeError

NEG_INF = -np.inf


# -- CTC ---------------------------------------------------------------------

def _extended_targets(targets, blank):
    ext = np.full(2 * len(targets) + 1, blank, dtype=np.int64)
    ext[1::2] = targets
    return ext


def ctc_check_feasible(targets, n_frames):
    """A valid alignment needs one frame per label plus one separator
    frame per adjacent repeat."""
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    if len(targets) + repeats > n_frames:
        raise InfeasibleTargetError(
            f"target of length {len(targets)} with {repeats} repeats "
            f"needs more than {n_frames} frames")


def ctc_forward_backward(log_probs, targets, blank=None):
    """Loss and gradient of -log P(targets | log_probs).

    ``log_probs`` is [T, C+1] with rows that are log-probabilities; the
    blank index defaults to the last class. Returns (loss, grad) where
    grad[t, c] = -gamma[t, c], the negative emission posterior.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, C1 = log_probs.shape
    if blank is None:
        blank = C1 - 1
    targets = list(int(t) for t in targets)
    for t in targets:
        if not 0 <= t < C1 or t == blank:
            raise ShapeError(f"target class {t} out of range (blank={blank})")
    ctc_check_feasible(targets, T)

    ext = _extended_targets(targets, blank)
    S = len(ext)
    lp_ext = log_probs[:, ext]                      # [T, S]
    skip_ok = np.zeros(S, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp_ext[0, 0]
    if S > 1:
        alpha[0, 1] = lp_ext[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        acc = np.logaddexp(prev, step)
        skip = np.full(S, NEG_INF)
        skip[2:] = prev[:-2]
        acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + lp_ext[t]

    log_z = alpha[T - 1, S - 1]
    if S > 1:
        log_z = np.logaddexp(log_z, alpha[T - 1, S - 2])
    if not np.isfinite(log_z):
        raise InfeasibleTargetError("no alignment has positive probability")

    # beta excludes the emission at t, so alpha+beta counts it exactly once
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp_ext[t + 1]
        step = np.full(S, NEG_INF)
        step[:-1] = nxt[1:]
        acc = np.logaddexp(nxt, step)
        skip = np.full(S, NEG_INF)
        skip[:-2] = nxt[2:]
        can_skip = np.full(S, False)
        can_skip[:-2] = skip_ok[2:]
        acc = np.where(can_skip, np.logaddexp(acc, skip), acc)
        beta[t] = acc

    occupancy = np.exp(alpha + beta - log_z)        # [T, S]
    grad = np.zeros_like(log_probs)
    np.add.at(grad.T, ext, occupancy.T)
    return float(-log_z), -grad


def ctc_loss(log_probs, targets, blank=None):
    """Tape-aware CTC: accepts a Tensor (or array) of log-probabilities
    and returns a scalar loss Tensor with the analytic gradient wired in."""
    lp = ad.as_tensor(log_probs)
    loss, grad = ctc_forward_backward(lp.data, targets, blank=blank)
    out = Tensor(np.float64(loss), requires_grad=lp.requires_grad,
                 _parents=(lp,))
    if lp.requires_grad:
        def bwd(g):
            lp._accum(g * grad)
        out._backward = bwd
    return out


# -- silence awareness ----------------------------------------------------------

SILENCE_WEIGHT_IN = 0.5    # penalty on blank probability inside silence
SILENCE_WEIGHT_OUT = 0.1   # and outside


@dataclass
class SilenceMask:
    flags: np.ndarray          # 1 = silence, per global frame
    threshold_db: float = -40.0

    def __len__(self):
        return len(self.flags)


def silence_mask_from_energy(samples, hop, threshold_db=-40.0, n_frames=None):
    """Frames whose RMS sits ``threshold_db`` below the peak frame RMS are
    silence; frames past the end of the audio (padding) always are."""
    rms = frame_rms(np.asarray(samples, dtype=np.float64), hop)
    peak = rms.max()
    thr = peak * 10.0 ** (threshold_db / 20.0)
    flags = rms <= thr
    if n_frames is not None:
        if n_frames <= len(flags):
            flags = flags[:n_frames]
        else:
            flags = np.concatenate([flags, np.ones(n_frames - len(flags), dtype=bool)])
    return SilenceMask(flags=flags.astype(np.float64), threshold_db=threshold_db)


def silence_loss(blank_probs, mask: SilenceMask):
    """Mean over frames of 0.5*y*M + 0.1*y*(1-M), y the blank probability."""
    y = ad.as_tensor(blank_probs)
    if y.data.ndim != 1:
        raise ShapeError(f"blank_probs must be 1-d, got {y.data.shape}")
    if y.data.shape[0] != len(mask):
        raise ShapeError(
            f"blank_probs has {y.data.shape[0]} frames, mask has {len(mask)}")
    coeff = SILENCE_WEIGHT_IN * mask.flags + SILENCE_WEIGHT_OUT * (1.0 - mask.flags)
    return ad.tmean(ad.mul(y, ad.constant(coeff)))


def combined_loss(log_probs, targets, mask: SilenceMask, alpha_s=0.01, blank=None):
    """CTC plus the weighted silence term for one utterance."""
    lp = ad.as_tensor(log_probs)
    blank_id = lp.data.shape[1] - 1 if blank is None else blank
    loss = ctc_loss(lp, targets, blank=blank_id)
    if alpha_s:
        blank_probs = ad.exp(lp[:, blank_id])
        loss = ad.add(loss, ad.mul(silence_loss(blank_probs, mask), alpha_s))
    return loss


# -- masking for self-supervised pretraining -------------------------------------

MASK_RATIO_MIN = 0.10
MASK_RATIO_MAX = 0.80


@dataclass
class MaskPlan:
    masked: list               # per window: sorted array of local frame indices
    target_ratio: float
    batch_ratio: float         # achieved fraction of all frames

    @property
    def achieved_ratio(self):
        return self.batch_ratio

    def total_masked(self):
        return sum(len(m) for m in self.masked)


def select_mask(frame_energies, rng, target_ratio=0.40, delta=None):
    """Choose frames to mask, energy-proportionally, always including
    frames at sharp energy changes (top decile of |dE|), with the overall
    ratio clamped to [0.10, 0.80]."""
    e = np.asarray(frame_energies, dtype=np.float64)
    if e.ndim != 2:
        raise ShapeError(f"frame energies must be [N, F], got {e.shape}")
    n_win, n_frames = e.shape
    total = n_win * n_frames
    ratio = float(np.clip(target_ratio, MASK_RATIO_MIN, MASK_RATIO_MAX))
    if delta is None:
        delta = 1e-6 + 0.01 * e.mean()

    diffs = np.zeros_like(e)
    diffs[:, 1:] = np.abs(np.diff(e, axis=1))
    flat_diffs = diffs.reshape(-1)
    cut = np.quantile(flat_diffs, 0.9)
    boundary = np.flatnonzero(flat_diffs > cut)   # strict: flat energy -> none

    weights = (e.reshape(-1) + delta)
    k_target = int(round(ratio * total))

    for _ in range(10):
        chosen = set(boundary.tolist())
        k_extra = k_target - len(chosen)
        if k_extra > 0:
            pool = np.array([i for i in range(total) if i not in chosen])
            p = weights[pool] / weights[pool].sum()
            extra = rng.choice(pool, size=min(k_extra, len(pool)), replace=False, p=p)
            chosen.update(extra.tolist())
        achieved = len(chosen) / total
        if MASK_RATIO_MIN <= achieved <= MASK_RATIO_MAX:
            break
    else:
        # clamp deterministically: keep the highest-weight frames
        order = sorted(chosen, key=lambda i: -weights[i])
        chosen = set(order[:int(MASK_RATIO_MAX * total)])

    masked = []
    for w in range(n_win):
        local = sorted(i - w * n_frames for i in chosen
                       if w * n_frames <= i < (w + 1) * n_frames)
        masked.append(np.array(local, dtype=np.int64))
    return MaskPlan(masked=masked, target_ratio=ratio,
                    batch_ratio=len(chosen) / total)


# -- vector quantization -----------------------------------------------------------

@dataclass
class CodebookState:
    entries: np.ndarray          # [K, D]
    ema_cluster_size: np.ndarray  # [K]
    ema_embed_sum: np.ndarray    # [K, D]
    decay: float = 0.99
    laplace_epsilon: float = 1e-5

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]


def init_codebook(rng, size=256, dim=256, decay=0.99, laplace_epsilon=1e-5):
    entries = rng.normal(0.0, 1.0, size=(size, dim)) / np.sqrt(dim)
    return CodebookState(entries=entries,
                         ema_cluster_size=np.ones(size),
                         ema_embed_sum=entries.copy(),
                         decay=decay, laplace_epsilon=laplace_epsilon)


def vq_assign(features, cb: CodebookState):
    """Nearest codebook entry by Euclidean distance; ties take the lowest
    index (argmin returns the first minimum)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != cb.dim:
        raise ShapeError(f"features must be [M, {cb.dim}], got {f.shape}")
    d2 = ((f * f).sum(axis=1, keepdims=True)
          + (cb.entries * cb.entries).sum(axis=1)
          - 2.0 * f @ cb.entries.T)
    return np.argmin(d2, axis=1)


def vq_ema_update(cb: CodebookState, features, codes):
    """One EMA step with Laplace-smoothed cluster sizes; returns a new state."""
    f = np.asarray(features, dtype=np.float64)
    counts = np.bincount(codes, minlength=cb.size).astype(np.float64)
    sums = np.zeros_like(cb.ema_embed_sum)
    np.add.at(sums, codes, f)

    size = cb.decay * cb.ema_cluster_size + (1.0 - cb.decay) * counts
    embed_sum = cb.decay * cb.ema_embed_sum + (1.0 - cb.decay) * sums
    n = size.sum()
    eps = cb.laplace_epsilon
    smoothed = (size + eps) / (n + cb.size * eps) * n
    entries = embed_sum / smoothed[:, None]
    return CodebookState(entries=entries, ema_cluster_size=size,
                         ema_embed_sum=embed_sum, decay=cb.decay,
                         laplace_epsilon=eps)


def codebook_perplexity(codes, size):
    """exp(entropy) of the code usage histogram."""
    usage = np.bincount(codes, minlength=size).astype(np.float64)
    p = usage / usage.sum()
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def codebook_similarity(cb: CodebookState):
    """Mean pairwise cosine similarity among codebook entries."""
    norms = np.linalg.norm(cb.entries, axis=1, keepdims=True)
    unit = cb.entries / np.maximum(norms, 1e-12)
    sims = unit @ unit.T
    k = cb.size
    return float((sims.sum() - np.trace(sims)) / (k * (k - 1)))


# -- self-supervised loss -----------------------------------------------------------

@dataclass
class SslWeights:
    reconstruction: float = 1.0
    contrastive: float = 1.0
    diversity: float = 0.1
    similarity: float = 0.05
    temperature: float = 0.1
    negatives_start: int = 8
    negatives_end: int = 64


def negatives_for_step(step, total_steps, warmup_frac, weights: SslWeights):
    """Linear ramp of the negative count over the warmup fraction."""
    warmup = max(1.0, warmup_frac * total_steps)
    frac = min(1.0, step / warmup)
    return int(round(weights.negatives_start
                     + (weights.negatives_end - weights.negatives_start) * frac))


def smooth_l1(pred, target):
    """Mean Huber loss (delta=1) built from primitives; the quadratic/linear
    split is fixed at forward time."""
    p, t = ad.as_tensor(pred), ad.as_tensor(target)
    d = ad.sub(p, t)
    inside = (np.abs(d.data) < 1.0).astype(np.float64)
    sign = np.sign(d.data)
    quad = ad.mul(ad.mul(d, d), ad.constant(0.5 * inside))
    lin = ad.add(ad.mul(d, ad.constant(sign * (1.0 - inside))),
                 ad.constant(-0.5 * (1.0 - inside)))
    return ad.tmean(ad.add(quad, lin))


def _l2_normalize(x):
    norms = ad.power(ad.tsum(ad.mul(x, x), axis=-1, keepdims=True), 0.5)
    return ad.div(x, ad.add(norms, 1e-12))


def info_nce(predictions, targets, n_negatives, rng, temperature):
    """Contrastive loss: each prediction scores its own quantized target
    against targets of other masked frames (cosine similarity / tau)."""
    m = predictions.data.shape[0]
    idx = np.empty((m, 1 + n_negatives), dtype=np.int64)
    idx[:, 0] = np.arange(m)
    for i in range(m):
        others = np.concatenate([np.arange(i), np.arange(i + 1, m)])
        idx[i, 1:] = rng.choice(others, size=n_negatives, replace=False)

    pn = _l2_normalize(predictions)
    cn = _l2_normalize(targets)
    cands = cn[idx]                                   # [M, 1+n, D]
    sims = ad.tsum(ad.mul(ad.reshape(pn, (m, 1, pn.data.shape[1])), cands), axis=-1)
    logits = ad.mul(sims, 1.0 / temperature)
    log_p = ad.log_softmax(logits, axis=-1)
    return ad.mul(ad.tmean(log_p[:, 0]), -1.0)


def ssl_loss(predictions, quantized_targets, codes, cb: CodebookState,
             weights: SslWeights, n_negatives, rng):
    """Total masked-prediction objective and its logged components.

    diversity = (K - perplexity(usage)) / K and the codebook cosine
    similarity are metrics of the EMA codebook (no gradient path); the
    reconstruction and contrastive terms carry the gradients.
    """
    pred = ad.as_tensor(predictions)
    targ = ad.as_tensor(quantized_targets)
    m = pred.data.shape[0]

    recon = smooth_l1(pred, targ)
    diversity = (cb.size - codebook_perplexity(codes, cb.size)) / cb.size
    similarity = codebook_similarity(cb)

    components = {
        "reconstruction": float(recon.data),
        "diversity": diversity,
        "similarity": similarity,
        "contrastive_skipped": False,
    }
    total = ad.mul(recon, weights.reconstruction)
    if m >= 2:
        n_neg = min(n_negatives, m - 1)
        contrast = info_nce(pred, targ, n_neg, rng, weights.temperature)
        components["contrastive"] = float(contrast.data)
        components["n_negatives"] = n_neg
        total = ad.add(total, ad.mul(contrast, weights.contrastive))
    else:
        components["contrastive"] = 0.0
        components["n_negatives"] = 0
        components["contrastive_skipped"] = True

    total = ad.add(total, weights.diversity * diversity + weights.similarity * similarity)
    components["total"] = float(total.data)
    return total, components
