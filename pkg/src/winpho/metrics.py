"""Greedy CTC decoding, optimal sequence alignment, and the evaluation
metric suite: phoneme error rate, ground-truth probability (macro and
frequency-weighted), macro F1, confusion counts with an unaligned
row/column, and per-frame probability timelines.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MATCH, SUBSTITUTE, DELETE, INSERT = "match", "substitute", "delete", "insert"


@dataclass
class DecodeResult:
    sequence: list            # collapsed class ids, no blanks
    frame_labels: np.ndarray  # pre-collapse argmax per frame
    segments: list            # (start_frame, end_frame) per decoded phoneme


def greedy_decode(posteriors, blank=None):
    """Per-frame argmax, collapse consecutive repeats, drop blanks.

    A decoded phoneme's segment is its maximal run of identical argmax
    frames, which later anchors the ground-truth-probability spans.
    """
    probs = np.asarray(getattr(posteriors, "frames", posteriors))
    if blank is None:
        blank = probs.shape[1] - 1
    labels = probs.argmax(axis=1)

    sequence = []
    segments = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            if labels[start] != blank:
                sequence.append(int(labels[start]))
                segments.append((start, i))
            start = i
    return DecodeResult(sequence=sequence, frame_labels=labels, segments=segments)


@dataclass
class AlignmentOp:
    kind: str
    true_idx: int = None      # index into the true sequence
    pred_idx: int = None      # index into the predicted sequence
    true_id: int = None
    pred_id: int = None


@dataclass
class AlignmentResult:
    ops: list
    matches: int
    substitutions: int
    insertions: int
    deletions: int

    @property
    def cost(self):
        return self.substitutions + self.insertions + self.deletions


def align(true_seq, pred_seq):
    """Levenshtein alignment with unit costs; the traceback prefers
    Match > Substitute > Delete > Insert on ties, for determinism."""
    n, m = len(true_seq), len(pred_seq)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = true_seq[i - 1] == pred_seq[j - 1]
            dist[i, j] = min(dist[i - 1, j - 1] + (0 if same else 1),
                             dist[i - 1, j] + 1,
                             dist[i, j - 1] + 1)

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and true_seq[i - 1] == pred_seq[j - 1] \
                and dist[i, j] == dist[i - 1, j - 1]:
            ops.append(AlignmentOp(MATCH, i - 1, j - 1, true_seq[i - 1], pred_seq[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + 1:
            ops.append(AlignmentOp(SUBSTITUTE, i - 1, j - 1, true_seq[i - 1], pred_seq[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ops.append(AlignmentOp(DELETE, true_idx=i - 1, true_id=true_seq[i - 1]))
            i -= 1
        else:
            ops.append(AlignmentOp(INSERT, pred_idx=j - 1, pred_id=pred_seq[j - 1]))
            j -= 1
    ops.reverse()

    counts = {MATCH: 0, SUBSTITUTE: 0, DELETE: 0, INSERT: 0}
    for op in ops:
        counts[op.kind] += 1
    return AlignmentResult(ops=ops, matches=counts[MATCH],
                           substitutions=counts[SUBSTITUTE],
                           insertions=counts[INSERT], deletions=counts[DELETE])


def per(ar: AlignmentResult, true_len):
    """(S + I + D) / max(|true|, 1); the floor keeps empty-truth records defined."""
    return ar.cost / max(true_len, 1)


def gp(posteriors, ar: AlignmentResult, decode: DecodeResult):
    """Mean posterior probability of the true class over each aligned
    phoneme's decoded frame span (matches and substitutions only).

    Returns (gp_macro, gp_weighted, per_class_scores); macro averages the
    per-class means, weighted averages over true occurrences. Both are
    None when nothing aligned.
    """
    probs = np.asarray(getattr(posteriors, "frames", posteriors))
    scores_by_class = {}
    all_scores = []
    for op in ar.ops:
        if op.kind not in (MATCH, SUBSTITUTE):
            continue
        lo, hi = decode.segments[op.pred_idx]
        score = float(probs[lo:hi, op.true_id].mean())
        scores_by_class.setdefault(op.true_id, []).append(score)
        all_scores.append(score)
    if not all_scores:
        return None, None, {}
    class_means = {c: float(np.mean(v)) for c, v in scores_by_class.items()}
    gp_macro = float(np.mean(list(class_means.values())))
    gp_weighted = float(np.mean(all_scores))
    return gp_macro, gp_weighted, class_means


def f1(alignments):
    """Macro F1 over classes present in the truth. Per class: TP from
    matches; FP from substitutions/insertions predicting it; FN from
    substitutions/deletions of it in the truth."""
    tp, fp, fn = {}, {}, {}
    truth_classes = set()
    for ar in alignments:
        for op in ar.ops:
            if op.true_id is not None:
                truth_classes.add(op.true_id)
            if op.kind == MATCH:
                tp[op.true_id] = tp.get(op.true_id, 0) + 1
            elif op.kind == SUBSTITUTE:
                fn[op.true_id] = fn.get(op.true_id, 0) + 1
                fp[op.pred_id] = fp.get(op.pred_id, 0) + 1
            elif op.kind == DELETE:
                fn[op.true_id] = fn.get(op.true_id, 0) + 1
            elif op.kind == INSERT:
                fp[op.pred_id] = fp.get(op.pred_id, 0) + 1
    if not truth_classes:
        return None, {}
    per_class = {}
    for c in truth_classes:
        t, p_, n_ = tp.get(c, 0), fp.get(c, 0), fn.get(c, 0)
        per_class[c] = 2.0 * t / (2.0 * t + p_ + n_) if (t + p_ + n_) else 0.0
    return float(np.mean(list(per_class.values()))), per_class


def confusion(alignments, num_classes):
    """(C+1) x (C+1) counts: cell [t, p] for aligned pairs, deletions in
    the trailing 'Un' column, insertions in the 'Un' row."""
    un = num_classes
    mat = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for ar in alignments:
        for op in ar.ops:
            if op.kind in (MATCH, SUBSTITUTE):
                mat[op.true_id, op.pred_id] += 1
            elif op.kind == DELETE:
                mat[op.true_id, un] += 1
            elif op.kind == INSERT:
                mat[un, op.pred_id] += 1
    return mat


def write_confusion(mat, inv, path):
    labels = [inv.symbol(c) for c in range(inv.num_classes)] + ["Un"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("true\\pred\t" + "\t".join(labels) + "\n")
        for i, row in enumerate(mat):
            fh.write(labels[i] + "\t" + "\t".join(str(v) for v in row) + "\n")


@dataclass
class MetricsReport:
    per: float
    gp_macro: float            # None when nothing aligned
    gp_weighted: float
    f1_macro: float
    confusion: np.ndarray
    n_utterances: int
    n_true: int
    per_class_f1: dict = field(default_factory=dict)
    per_class_gp: dict = field(default_factory=dict)

    def lines(self, inv=None):
        def fmt(x):
            return "n/a" if x is None else f"{x:.4f}"

        out = [
            f"utterances\t{self.n_utterances}",
            f"true_phonemes\t{self.n_true}",
            f"per\t{fmt(self.per)}",
            f"gp_macro\t{fmt(self.gp_macro)}",
            f"gp_weighted\t{fmt(self.gp_weighted)}",
            f"f1_macro\t{fmt(self.f1_macro)}",
        ]
        if inv is not None and self.per_class_f1:
            out.append("class\tf1\tgp")
            for c in sorted(self.per_class_f1):
                gp_c = self.per_class_gp.get(c)
                out.append(f"{inv.symbol(c)}\t{self.per_class_f1[c]:.4f}\t{fmt(gp_c)}")
        return out


def aggregate(results, num_classes):
    """Merge per-utterance (alignment, gp scores) into one report.

    ``results`` holds (AlignmentResult, true_len, class_scores, all_scores)
    tuples; the merge is associative so shards can be combined.
    """
    total_cost = 0
    total_true = 0
    scores_by_class = {}
    all_scores = []
    alignments = []
    for ar, true_len, class_scores, utt_scores in results:
        alignments.append(ar)
        total_cost += ar.cost
        total_true += true_len
        for c, vals in class_scores.items():
            scores_by_class.setdefault(c, []).extend(vals)
        all_scores.extend(utt_scores)

    f1_macro, per_class_f1 = f1(alignments)
    class_means = {c: float(np.mean(v)) for c, v in scores_by_class.items()}
    gp_macro = float(np.mean(list(class_means.values()))) if class_means else None
    gp_weighted = float(np.mean(all_scores)) if all_scores else None
    return MetricsReport(
        per=total_cost / max(total_true, 1),
        gp_macro=gp_macro, gp_weighted=gp_weighted, f1_macro=f1_macro,
        confusion=confusion(alignments, num_classes),
        n_utterances=len(alignments), n_true=total_true,
        per_class_f1=per_class_f1, per_class_gp=class_means)


def evaluate_utterance(posteriors, true_ids, blank=None):
    """Decode, align and score one utterance; returns the tuple consumed
    by :func:`aggregate` plus the decode result."""
    decode = greedy_decode(posteriors, blank=blank)
    ar = align(true_ids, decode.sequence)
    _, _, class_means = gp(posteriors, ar, decode)
    # keep raw per-occurrence scores for the weighted mean
    probs = np.asarray(getattr(posteriors, "frames", posteriors))
    class_scores = {}
    utt_scores = []
    for op in ar.ops:
        if op.kind in (MATCH, SUBSTITUTE):
            lo, hi = decode.segments[op.pred_idx]
            s = float(probs[lo:hi, op.true_id].mean())
            class_scores.setdefault(op.true_id, []).append(s)
            utt_scores.append(s)
    return (ar, len(true_ids), class_scores, utt_scores), decode


def timeline_export(posteriors, path, inv, true_labels=None):
    """One row per frame: time, C+1 probabilities, argmax label and an
    optional ground-truth label; tab-separated with a header."""
    probs = np.asarray(getattr(posteriors, "frames", posteriors))
    hop = getattr(posteriors, "frame_hop", None)
    times = (np.arange(len(probs)) * hop if hop is not None
             else np.arange(len(probs), dtype=np.float64))
    labels = [inv.symbol(c) for c in range(probs.shape[1] - 1)] + ["<blank>"]
    decode = greedy_decode(probs)
    with open(path, "w", encoding="utf-8") as fh:
        header = ["time_s"] + labels + ["argmax"]
        if true_labels is not None:
            header.append("truth")
        fh.write("\t".join(header) + "\n")
        for i, row in enumerate(probs):
            cells = [f"{times[i]:.6f}"] + [f"{v:.8f}" for v in row]
            cells.append(labels[decode.frame_labels[i]]
                         if decode.frame_labels[i] < probs.shape[1] - 1 else "<blank>")
            if true_labels is not None:
                cells.append(true_labels[i] if i < len(true_labels) else "")
            fh.write("\t".join(cells) + "\n")
    return path
