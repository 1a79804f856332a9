"""Training, evaluation and inference orchestration.

Supervised training: slice -> encode -> classify -> log-softmax ->
stitch -> CTC + weighted silence term -> global-norm clip -> AdamW with
one-cycle scheduling. Self-supervised pretraining: energy-guided frame
masking, window-local transformer over corrupted features, projection
into the quantizer space, and the four-part masked-prediction loss with
an EMA codebook. Fine-tuning reuses the supervised loop with a fresh
classifier, optionally freezing the feature extractor.

Everything is seeded; two runs with the same config produce
byte-identical checkpoints.
"""

import json
import os
import sys
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from . import metrics as M
from . import objectives as obj
from . import optim
from . import phonemes as ph
from .autodiff import Tensor
from .dataio import load_manifest, load_wav
from .errors import CheckpointError, NonFiniteError
from .model import Encoder, ModelConfig, build
from .optim import AdamW, OneCycle, clip_global_norm
from .window import slice_clip, stitch_matrix


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    learning_rate: float = 3e-4        # supervised peak rate (chosen, not quoted)
    weight_decay: float = 0.01
    warmup_frac: float = 0.15
    momentum_low: float = 0.8
    momentum_high: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    alpha_s: float = 0.01
    silence_threshold_db: float = -40.0
    val_every: int = 200
    val_utterances: int = 64
    stop_per: float = -1.0             # early-stop when validation PER <= this; <0 disables
    # self-supervised settings
    ssl_lr_encoder: float = 5e-4
    ssl_lr_quantizer: float = 1e-3
    ssl_lr_head: float = 1.5e-3
    ssl_weight_decay: float = 0.05
    mask_ratio: float = 0.40
    codebook_size: int = 256
    codebook_decay: float = 0.99
    finetune_lr_scale: float = 0.1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class RunLog:
    """Line-delimited JSON log; keeps records in memory and optionally
    appends to a file / echoes to stderr (WINPHO_LOG=debug)."""

    def __init__(self, path=None, echo=None):
        self.records = []
        self.path = Path(path) if path else None
        if echo is None:
            echo = os.environ.get("WINPHO_LOG", "").lower() == "debug"
        self.echo = echo
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def __call__(self, **record):
        self.records.append(record)
        if self.path or self.echo:
            line = json.dumps(record, sort_keys=True, default=float)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            if self.echo:
                print(line, file=sys.stderr)

    def of_event(self, event):
        return [r for r in self.records if r.get("event") == event]


@dataclass
class _Utterance:
    """Preprocessed training unit: fixed windows, stitch geometry,
    silence mask and target ids."""
    source: str
    samples: np.ndarray
    targets: list
    windows: np.ndarray       # [N, W]
    stitch_mat: np.ndarray    # [T_f, N * F_w]
    silence: obj.SilenceMask
    energies: np.ndarray      # [N, F_w]

    @property
    def n_windows(self):
        return self.windows.shape[0]

    @property
    def n_frames(self):
        return self.stitch_mat.shape[0]


def _window_frame_energies(windows, frames):
    chunk = windows.shape[1] // frames
    trimmed = windows[:, :chunk * frames].reshape(windows.shape[0], frames, chunk)
    return np.sqrt((trimmed ** 2).mean(axis=2))


def prepare_utterances(records, inv, model_cfg: ModelConfig, base_dir,
                       silence_threshold_db=-40.0):
    """Load audio, map tokens and precompute the per-utterance geometry
    reused every step (windows, deposit matrix, silence mask)."""
    base = Path(base_dir)
    frames = model_cfg.frames_per_window
    out = []
    for rec in records:
        clip = load_wav(base / rec.path)
        targets, _ = ph.map_sequence(rec.tokens, inv)
        batch = slice_clip(clip.samples, model_cfg.window)
        mat, _ = stitch_matrix(batch, model_cfg.window, frames)
        mask = obj.silence_mask_from_energy(
            clip.samples, model_cfg.window.frame_hop_samples,
            threshold_db=silence_threshold_db, n_frames=mat.shape[0])
        out.append(_Utterance(
            source=rec.path, samples=clip.samples, targets=targets,
            windows=batch.windows.data, stitch_mat=mat, silence=mask,
            energies=_window_frame_energies(batch.windows.data, frames)))
    return out


class _Batcher:
    """Seeded epoch-shuffled batching."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xba7c]))
        self.order = []

    def next_batch(self):
        if len(self.order) < self.batch_size:
            self.order = list(self.rng.permutation(self.n))
        picked = self.order[:self.batch_size]
        self.order = self.order[self.batch_size:]
        return picked


def _step_rng(seed, step, tag):
    return np.random.default_rng(np.random.SeedSequence([seed, step, tag]))


def _stitched_log_probs(probs_slice, utt: _Utterance, classes):
    """Per-utterance stitch (cached deposit matrix) and log, on the tape."""
    flat = ad.reshape(probs_slice, (utt.n_windows * probs_slice.data.shape[1], classes))
    raw = ad.matmul(ad.constant(utt.stitch_mat), flat)
    stitched = ad.div(raw, ad.tsum(raw, axis=1, keepdims=True))
    return ad.log(stitched), stitched


def _supervised_step(enc, opt, sched, cfg, utts, idx, step, log):
    batch = [utts[i] for i in idx]
    mega = np.concatenate([u.windows for u in batch], axis=0)
    rng = _step_rng(cfg.seed, step, 0xd0)

    emb = enc.encode_window(Tensor(mega), training=True, rng=rng)
    logits = enc.classify(emb, training=True, rng=rng)
    log_probs = ad.log_softmax(logits, axis=-1)
    probs = ad.exp(log_probs)

    classes = probs.data.shape[2]
    blank = classes - 1
    ctc_vals, sil_vals, losses = [], [], []
    row = 0
    for u in batch:
        pu = probs[row:row + u.n_windows]
        row += u.n_windows
        lp, stitched = _stitched_log_probs(pu, u, classes)
        ctc_t = obj.ctc_loss(lp, u.targets, blank=blank)
        sil_t = obj.silence_loss(stitched[:, blank], u.silence)
        losses.append(ad.add(ctc_t, ad.mul(sil_t, cfg.alpha_s)))
        ctc_vals.append(float(ctc_t.data))
        sil_vals.append(float(sil_t.data))

    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    total = ad.mul(total, 1.0 / len(losses))

    if not np.isfinite(total.data):
        log(event="abort", step=step, reason="non-finite loss",
            batch=[u.source for u in batch], ctc=ctc_vals, sil=sil_vals)
        raise NonFiniteError(f"non-finite loss at step {step}")

    ad.backward(total)
    pre, post = clip_global_norm(opt.tensors(), cfg.grad_clip)
    factor = sched.lr_factor(step)
    opt.step(lr_factor=factor, beta1=sched.momentum(step))
    opt.zero_grad()
    log(event="train_step", step=step, loss=float(total.data),
        ctc=float(np.mean(ctc_vals)), sil=float(np.mean(sil_vals)),
        grad_norm=pre, post_clip_norm=post,
        lr=opt.group_rates(factor), momentum=sched.momentum(step))
    return float(total.data)


def evaluate_utterances(enc, utts, inv):
    """PER/GP/F1 report over preprocessed utterances (eval mode)."""
    results = []
    for u in utts:
        posts, _ = enc.forward_clip(u.samples)
        res, _ = M.evaluate_utterance(posts, u.targets)
        results.append(res)
    return M.aggregate(results, inv.num_classes)


def _maybe_validate(enc, cfg, val_utts, inv, step, log):
    report = evaluate_utterances(enc, val_utts[:cfg.val_utterances], inv)
    log(event="validation", step=step, per=report.per,
        gp_macro=report.gp_macro, gp_weighted=report.gp_weighted,
        f1_macro=report.f1_macro)
    return report


def _run_supervised_loop(enc, opt, cfg, train_utts, val_utts, inv, log):
    sched = OneCycle(total_steps=cfg.steps, warmup_frac=cfg.warmup_frac,
                     momentum_low=cfg.momentum_low, momentum_high=cfg.momentum_high)
    batcher = _Batcher(len(train_utts), cfg.batch_size, cfg.seed)
    step = 0
    for step in range(1, cfg.steps + 1):
        _supervised_step(enc, opt, sched, cfg, train_utts, batcher.next_batch(),
                         step, log)
        if cfg.val_every and (step % cfg.val_every == 0 or step == cfg.steps):
            report = _maybe_validate(enc, cfg, val_utts, inv, step, log)
            if cfg.stop_per >= 0.0 and report.per <= cfg.stop_per:
                log(event="early_stop", step=step, per=report.per)
                break
    return step


def _split_utts(utts, records):
    train = [u for u, r in zip(utts, records) if r.split != "val"]
    val = [u for u, r in zip(utts, records) if r.split == "val"]
    return train, (val if val else train)


def train_supervised(model_cfg: ModelConfig, cfg: TrainConfig, manifest_path,
                     inventory_path, out_path, log=None):
    """Supervised CTC+silence training from scratch; returns
    (encoder, final validation report, checkpoint path)."""
    log = log or RunLog()
    inv = ph.load_inventory(inventory_path)
    if inv.num_classes != model_cfg.num_classes:
        raise CheckpointError(
            f"model has {model_cfg.num_classes} classes, inventory {inv.num_classes}")
    records = load_manifest(manifest_path)
    utts = prepare_utterances(records, inv, model_cfg, Path(manifest_path).parent,
                              cfg.silence_threshold_db)
    train_utts, val_utts = _split_utts(utts, records)

    enc = build(model_cfg, seed=cfg.seed)
    opt = AdamW(enc.named_tensors().items(), {"all": cfg.learning_rate},
                group_of=lambda name: "all",
                betas=(cfg.momentum_high, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    t0 = time.time()
    last_step = _run_supervised_loop(enc, opt, cfg, train_utts, val_utts, inv, log)
    report = evaluate_utterances(enc, val_utts, inv)
    log(event="final", step=last_step, per=report.per, gp_macro=report.gp_macro,
        seconds=time.time() - t0)
    ckpt_io.save(out_path, enc, step=last_step, kind="supervised",
                 train_config={"train": cfg.to_dict(), "model": model_cfg.to_dict()},
                 optimizer=opt)
    return enc, report, out_path


def _build_mask_matrix(plan, n_windows, frames):
    mat = np.zeros((n_windows, frames))
    for w, local in enumerate(plan.masked):
        mat[w, local] = 1.0
    return mat


def pretrain_ssl(model_cfg: ModelConfig, cfg: TrainConfig, manifest_path,
                 out_path, log=None):
    """Masked-prediction pretraining; labels in the manifest are unused.
    Returns (encoder, codebook, checkpoint path)."""
    log = log or RunLog()
    records = load_manifest(manifest_path)
    inv = ph.subset(ph.load_default_inventory(), model_cfg.num_classes)
    # targets are not needed; reuse the preparation path with token mapping
    # suppressed by replacing tokens with an empty list
    for r in records:
        r.tokens = []
    utts = prepare_utterances(records, inv, model_cfg, Path(manifest_path).parent,
                              cfg.silence_threshold_db)

    enc = build(model_cfg, seed=cfg.seed)
    cb = obj.init_codebook(
        np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xcb])),
        size=cfg.codebook_size, dim=model_cfg.projection_dim,
        decay=cfg.codebook_decay)
    group_lrs = {"encoder": cfg.ssl_lr_encoder, "quantizer": cfg.ssl_lr_quantizer,
                 "head": cfg.ssl_lr_head, "classifier": cfg.ssl_lr_encoder}
    opt = AdamW(enc.named_tensors().items(), group_lrs,
                group_of=enc.parameter_group,
                betas=(cfg.momentum_high, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=cfg.ssl_weight_decay)
    sched = OneCycle(total_steps=cfg.steps, warmup_frac=cfg.warmup_frac,
                     momentum_low=cfg.momentum_low, momentum_high=cfg.momentum_high)
    batcher = _Batcher(len(utts), cfg.batch_size, cfg.seed)
    weights = obj.SslWeights()
    frames = model_cfg.frames_per_window

    for step in range(1, cfg.steps + 1):
        batch = [utts[i] for i in batcher.next_batch()]
        mega = np.concatenate([u.windows for u in batch], axis=0)
        energies = np.concatenate([u.energies for u in batch], axis=0)
        rng = _step_rng(cfg.seed, step, 0xd0)
        mask_rng = _step_rng(cfg.seed, step, 0xa5)

        plan = obj.select_mask(energies, mask_rng, target_ratio=cfg.mask_ratio)
        mask_matrix = _build_mask_matrix(plan, mega.shape[0], frames)
        rows, cols = np.nonzero(mask_matrix)
        if len(rows) == 0:
            log(event="skip_step", step=step, reason="empty mask")
            continue

        feats = enc.feature_frames(Tensor(mega), training=True, rng=rng)
        ctx = enc.contextualize(feats, training=True, rng=rng,
                                mask_matrix=mask_matrix)
        pred_all = enc.project(ctx, training=True, rng=rng)
        preds = pred_all[rows, cols]

        tfeats = enc.quantizer_features(feats)
        tsel = tfeats[rows, cols]
        codes = obj.vq_assign(tsel.data, cb)
        # straight-through: value is the codebook entry, gradient reaches
        # the quantizer input projection
        quantized = ad.add(tsel, ad.constant(cb.entries[codes] - tsel.data))

        n_neg = obj.negatives_for_step(step, cfg.steps, cfg.warmup_frac, weights)
        total, comps = obj.ssl_loss(preds, quantized, codes, cb, weights,
                                    n_neg, _step_rng(cfg.seed, step, 0x9e))
        if not np.isfinite(total.data):
            log(event="abort", step=step, reason="non-finite loss", components=comps)
            raise NonFiniteError(f"non-finite SSL loss at step {step}")

        ad.backward(total)
        pre, post = clip_global_norm(opt.tensors(), cfg.grad_clip)
        factor = sched.lr_factor(step)
        opt.step(lr_factor=factor, beta1=sched.momentum(step))
        opt.zero_grad()
        cb = obj.vq_ema_update(cb, tsel.data, codes)

        log(event="ssl_step", step=step, masked=len(rows),
            mask_ratio=plan.batch_ratio,
            perplexity=obj.codebook_perplexity(codes, cb.size),
            grad_norm=pre, post_clip_norm=post, lr=opt.group_rates(factor),
            **{k: v for k, v in comps.items() if isinstance(v, (int, float, bool))})

    ckpt_io.save(out_path, enc, step=cfg.steps, kind="ssl",
                 train_config={"train": cfg.to_dict(), "model": model_cfg.to_dict()},
                 optimizer=opt, codebook=cb)
    return enc, cb, out_path


def finetune(cfg: TrainConfig, ssl_checkpoint_path, manifest_path, inventory_path,
             out_path, freeze_features=True, log=None):
    """Swap the pretraining head for a fresh classifier and run the
    supervised loop at a reduced rate; optionally freeze the feature
    extractor (stats and weights)."""
    log = log or RunLog()
    loaded = ckpt_io.load(ssl_checkpoint_path)
    enc = ckpt_io.restore_encoder(loaded, seed=cfg.seed)
    model_cfg = enc.cfg
    inv = ph.load_inventory(inventory_path)
    if inv.num_classes != model_cfg.num_classes:
        raise CheckpointError(
            f"checkpoint model has {model_cfg.num_classes} classes, "
            f"inventory has {inv.num_classes}")

    enc.drop_pt_head()
    enc.reset_classifier(cfg.seed)
    if freeze_features:
        enc.freeze_feature_extractor()

    records = load_manifest(manifest_path)
    utts = prepare_utterances(records, inv, model_cfg, Path(manifest_path).parent,
                              cfg.silence_threshold_db)
    train_utts, val_utts = _split_utts(utts, records)

    lr = cfg.learning_rate * cfg.finetune_lr_scale
    opt = AdamW(enc.named_tensors().items(), {"all": lr},
                group_of=lambda name: "all",
                betas=(cfg.momentum_high, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    last_step = _run_supervised_loop(enc, opt, cfg, train_utts, val_utts, inv, log)
    report = evaluate_utterances(enc, val_utts, inv)
    log(event="final", step=last_step, per=report.per, gp_macro=report.gp_macro)
    ckpt_io.save(out_path, enc, step=last_step, kind="finetuned",
                 train_config={"train": cfg.to_dict(), "model": model_cfg.to_dict()},
                 optimizer=opt)
    return enc, report, out_path


def evaluate(checkpoint_path, manifest_path, inventory_path, out_dir=None,
             timelines=False, split=None, log=None):
    """Forward + greedy decode + alignment over a manifest; writes the
    report and confusion matrix when ``out_dir`` is given."""
    log = log or RunLog()
    loaded = ckpt_io.load(checkpoint_path)
    enc = ckpt_io.restore_encoder(loaded)
    inv = ph.load_inventory(inventory_path)
    if inv.num_classes != enc.cfg.num_classes:
        raise CheckpointError(
            f"checkpoint model has {enc.cfg.num_classes} classes, "
            f"inventory has {inv.num_classes}")
    records = load_manifest(manifest_path)
    if split:
        records = [r for r in records if r.split == split]
    base = Path(manifest_path).parent

    results = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        if timelines:
            (out / "timelines").mkdir(exist_ok=True)
    for i, rec in enumerate(records):
        clip = load_wav(base / rec.path)
        posts, _ = enc.forward_clip(clip.samples)
        targets, _ = ph.map_sequence(rec.tokens, inv)
        res, decode = M.evaluate_utterance(posts, targets)
        results.append(res)
        if out and timelines:
            M.timeline_export(posts, out / "timelines" / f"utt_{i:05d}.tsv", inv)
    report = M.aggregate(results, inv.num_classes)
    log(event="evaluation", utterances=len(records), per=report.per,
        gp_macro=report.gp_macro, gp_weighted=report.gp_weighted,
        f1_macro=report.f1_macro)
    if out:
        (out / "report.tsv").write_text("\n".join(report.lines(inv)) + "\n",
                                        encoding="utf-8")
        M.write_confusion(report.confusion, inv, out / "confusion.tsv")
    return report


def infer(checkpoint_path, wav_path, inventory_path=None, timeline_path=None):
    """Decode one WAV; returns (decoded symbols with spans, posteriors)."""
    loaded = ckpt_io.load(checkpoint_path)
    enc = ckpt_io.restore_encoder(loaded)
    if inventory_path:
        inv = ph.load_inventory(inventory_path)
    else:
        inv = ph.subset(ph.load_default_inventory(), enc.cfg.num_classes)
    if inv.num_classes != enc.cfg.num_classes:
        raise CheckpointError(
            f"checkpoint model has {enc.cfg.num_classes} classes, "
            f"inventory has {inv.num_classes}")
    clip = load_wav(wav_path)
    posts, _ = enc.forward_clip(clip.samples)
    decode = M.greedy_decode(posts)
    hop = posts.frame_hop
    entries = []
    for cid, (lo, hi) in zip(decode.sequence, decode.segments):
        entries.append({"symbol": inv.symbol(cid), "class_id": cid,
                        "start_frame": lo, "end_frame": hi,
                        "start_s": lo * hop, "end_s": hi * hop})
    if timeline_path:
        M.timeline_export(posts, timeline_path, inv)
    return entries, posts
