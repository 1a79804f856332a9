"""Decoding and metric oracles: an independent two-row edit-distance
implementation cross-checks the aligner, and the micro-cases are
hand-computed."""

import numpy as np
import pytest

from winpho import metrics as M
from winpho import phonemes


def edit_distance_oracle(a, b):
    """Textbook two-row Wagner-Fischer, cost only."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j - 1] + (ca != cb), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def one_hot_frames(labels, classes):
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class TestGreedyDecode:
    def test_collapse_rule(self):
        # frames: blank, a, a, blank, b (blank = 2)
        probs = one_hot_frames([2, 0, 0, 2, 1], 3)
        d = M.greedy_decode(probs)
        assert d.sequence == [0, 1]
        assert d.segments == [(1, 3), (4, 5)]

    def test_blank_separates_repeats(self):
        probs = one_hot_frames([0, 0, 2, 0], 3)
        assert M.greedy_decode(probs).sequence == [0, 0]

    def test_all_blank_empty(self):
        probs = one_hot_frames([2, 2, 2], 3)
        d = M.greedy_decode(probs)
        assert d.sequence == []
        assert d.segments == []

    def test_never_emits_blank_or_adjacent_duplicates_property(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            probs = rng.dirichlet(np.ones(4), size=int(rng.integers(1, 30)))
            d = M.greedy_decode(probs)
            assert all(c != 3 for c in d.sequence)
            for (a_lo, a_hi), (b_lo, b_hi), ca, cb in zip(
                    d.segments, d.segments[1:], d.sequence, d.sequence[1:]):
                if a_hi == b_lo:  # adjacent runs must differ
                    assert ca != cb


class TestAlign:
    def test_perfect(self):
        ar = M.align([1, 2, 3], [1, 2, 3])
        assert (ar.matches, ar.substitutions, ar.insertions, ar.deletions) == (3, 0, 0, 0)

    def test_one_substitution(self):
        ar = M.align([1, 2, 3], [1, 2, 4])
        assert ar.matches == 2 and ar.substitutions == 1
        assert ar.cost == 1

    def test_all_deleted(self):
        ar = M.align([1, 2, 3], [])
        assert ar.deletions == 3 and ar.cost == 3

    def test_accounting_identities_random(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            t = rng.integers(0, 10, size=rng.integers(0, 12)).tolist()
            p = rng.integers(0, 10, size=rng.integers(0, 12)).tolist()
            ar = M.align(t, p)
            assert ar.matches + ar.substitutions + ar.deletions == len(t)
            assert ar.matches + ar.substitutions + ar.insertions == len(p)

    def test_cost_matches_oracle_1000_pairs(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            t = rng.integers(0, 10, size=rng.integers(0, 13)).tolist()
            p = rng.integers(0, 10, size=rng.integers(0, 13)).tolist()
            assert M.align(t, p).cost == edit_distance_oracle(t, p)

    def test_tiebreak_prefers_match(self):
        ar = M.align([1, 1], [1])
        kinds = [op.kind for op in ar.ops]
        assert M.MATCH in kinds and ar.cost == 1


class TestPer:
    def test_zero_for_identity(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            x = rng.integers(0, 5, size=rng.integers(1, 10)).tolist()
            assert M.per(M.align(x, x), len(x)) == 0.0

    def test_one_third(self):
        ar = M.align([1, 2, 3], [1, 2, 4])
        assert M.per(ar, 3) == pytest.approx(1 / 3)

    def test_empty_truth_floor(self):
        ar = M.align([], [5, 6])
        assert M.per(ar, 0) == pytest.approx(2.0)


class TestGp:
    def test_constant_posterior(self):
        probs = np.full((4, 3), [0.7, 0.2, 0.1])
        d = M.DecodeResult(sequence=[0], frame_labels=np.zeros(4, dtype=int),
                           segments=[(0, 4)])
        ar = M.align([0], [0])
        gm, gw, _ = M.gp(probs, ar, d)
        assert gm == pytest.approx(0.7) and gw == pytest.approx(0.7)

    def test_one_hot_perfect(self):
        probs = one_hot_frames([0, 1], 3)
        d = M.greedy_decode(probs)
        ar = M.align([0, 1], d.sequence)
        gm, gw, _ = M.gp(probs, ar, d)
        assert gm == pytest.approx(1.0) and gw == pytest.approx(1.0)

    def test_macro_vs_weighted(self):
        # class A scores 0.2 over 9 occurrences, class B scores 0.8 once
        frames = []
        labels = []
        for _ in range(9):
            frames.append([0.2, 0.5, 0.3])
            labels.append(0)
        frames.append([0.1, 0.8, 0.1])
        labels.append(1)
        probs = np.array(frames)
        # one frame per phoneme; force distinct segments via argmax runs
        segs = [(i, i + 1) for i in range(10)]
        d = M.DecodeResult(sequence=labels, frame_labels=np.array(labels),
                           segments=segs)
        truth = [0] * 9 + [1]
        ar = M.align(truth, labels)
        gm, gw, _ = M.gp(probs, ar, d)
        # true class of the 9 A-occurrences worth 0.2 each; B worth 0.8
        assert gm == pytest.approx((0.2 + 0.8) / 2)
        assert gw == pytest.approx((9 * 0.2 + 0.8) / 10)
        assert gw == pytest.approx(0.26)

    def test_empty_alignment_absent(self):
        gm, gw, scores = M.gp(np.zeros((0, 3)), M.align([], []),
                              M.DecodeResult([], np.zeros(0, dtype=int), []))
        assert gm is None and gw is None and scores == {}


class TestF1:
    def test_all_perfect(self):
        ars = [M.align([1, 2], [1, 2])]
        macro, _ = M.f1(ars)
        assert macro == pytest.approx(1.0)

    def test_absent_class_zero(self):
        ars = [M.align([1, 2], [1, 3])]  # class 2 never predicted
        macro, per_class = M.f1(ars)
        assert per_class[2] == 0.0
        assert macro < 1.0

    def test_hand_built_two_class(self):
        # truth [a, b], predicted [a, a]: a has TP=1 FP=1, b has FN=1
        ars = [M.align([0, 1], [0, 0])]
        macro, per_class = M.f1(ars)
        assert per_class[0] == pytest.approx(2 / 3)
        assert per_class[1] == 0.0
        assert macro == pytest.approx(1 / 3)


class TestConfusion:
    def test_diagonal_on_perfect(self):
        ars = [M.align([0, 1, 2], [0, 1, 2])]
        mat = M.confusion(ars, 3)
        assert mat[0, 0] == 1 and mat[1, 1] == 1 and mat[2, 2] == 1
        assert mat.sum() == 3

    def test_deletion_in_un_column(self):
        ars = [M.align([0], [])]
        mat = M.confusion(ars, 3)
        assert mat[0, 3] == 1

    def test_row_accounting_identity(self):
        rng = np.random.default_rng(17)
        ars = []
        true_counts = np.zeros(5, dtype=int)
        total_ops = 0
        for _ in range(30):
            t = rng.integers(0, 5, size=rng.integers(0, 8)).tolist()
            p = rng.integers(0, 5, size=rng.integers(0, 8)).tolist()
            ar = M.align(t, p)
            ars.append(ar)
            for c in t:
                true_counts[c] += 1
            total_ops += ar.matches + ar.substitutions + ar.insertions + ar.deletions
        mat = M.confusion(ars, 5)
        # row sums over real classes (incl. Un column) equal true counts
        np.testing.assert_array_equal(mat[:5].sum(axis=1), true_counts)
        assert mat.sum() == total_ops


class TestAggregateAndTimeline:
    def test_aggregate_fields_in_range(self):
        rng = np.random.default_rng(23)
        results = []
        for _ in range(10):
            probs = rng.dirichlet(np.ones(4), size=20)
            truth = rng.integers(0, 3, size=5).tolist()
            res, _ = M.evaluate_utterance(probs, truth)
            results.append(res)
        report = M.aggregate(results, num_classes=3)
        assert report.per >= 0.0
        assert report.n_utterances == 10
        if report.gp_macro is not None:
            assert 0.0 <= report.gp_macro <= 1.0
            assert 0.0 <= report.gp_weighted <= 1.0
        assert 0.0 <= report.f1_macro <= 1.0
        assert report.confusion.shape == (4, 4)
        assert len(report.lines()) >= 6

    def test_timeline_roundtrip(self, tmp_path):
        rng = np.random.default_rng(29)
        inv = phonemes.subset(phonemes.load_default_inventory(), 3)
        probs = rng.dirichlet(np.ones(4), size=76)

        class P:
            frames = probs
            frame_hop = 210 / 16000

        path = tmp_path / "timeline.tsv"
        M.timeline_export(P(), path, inv)
        lines = path.read_text(encoding="utf-8").strip().split("\n")
        assert len(lines) == 77  # header + one per frame
        header = lines[0].split("\t")
        assert header[0] == "time_s" and header[-1] == "argmax"
        parsed = np.array([[float(v) for v in ln.split("\t")[1:5]] for ln in lines[1:]])
        np.testing.assert_allclose(parsed.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(parsed, probs, atol=1e-8)
