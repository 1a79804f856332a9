"""Window slicing and cosine stitching against hand-evaluated cases."""

import numpy as np
import pytest

from winpho import autodiff as ad
from winpho import window as win
from winpho.errors import ShapeError


CFG = win.WindowConfig()


def test_frames_per_window_paper_sizes():
    assert win.chain_frame_count(1920) == 10
    assert win.chain_frame_count(5760) == 28


def test_frames_per_window_160ms_derived():
    # chain the four stage formulas by hand for W=2560:
    # 2560 -> 366 -> 74 -> 25 -> 13
    length = 2560
    for k, s, p in win.CONV_STAGES:
        length = (length + 2 * p - k) // s + 1
    assert length == 13
    assert win.chain_frame_count(2560) == 13


def test_slice_counts_one_second():
    batch = win.slice_clip(np.zeros(16000), CFG)
    assert batch.count == 12
    assert batch.pad_amount == 0
    assert batch.offsets == [i * 1280 for i in range(12)]


def test_slice_exact_window():
    batch = win.slice_clip(np.ones(1920), CFG)
    assert batch.count == 1
    assert batch.pad_amount == 0


def test_slice_short_audio_padded():
    audio = np.ones(1000)
    batch = win.slice_clip(audio, CFG)
    assert batch.count == 1
    assert batch.pad_amount == 920
    np.testing.assert_array_equal(batch.windows.data[0, :1000], 1.0)
    np.testing.assert_array_equal(batch.windows.data[0, 1000:], 0.0)


def test_slice_trailing_partial_covered():
    batch = win.slice_clip(np.ones(16001), CFG)
    assert batch.count == 13
    assert batch.offsets[-1] + CFG.window_samples == 16001 + batch.pad_amount


def test_slice_empty_rejected():
    with pytest.raises(ShapeError):
        win.slice_clip(np.zeros(0), CFG)


def test_slice_readback_property():
    rng = np.random.default_rng(17)
    for _ in range(10):
        T = int(rng.integers(500, 30000))
        x = rng.normal(size=T)
        batch = win.slice_clip(x, CFG)
        for i in (0, batch.count // 2, batch.count - 1):
            off = batch.offsets[i]
            n_real = min(CFG.window_samples, T - off)
            np.testing.assert_array_equal(batch.windows.data[i, :n_real],
                                          x[off:off + n_real])


def test_cosine_weight_values():
    assert win.cosine_weight(5, 10) == pytest.approx(1.0)
    assert win.cosine_weight(0, 10) == pytest.approx(1e-6)
    assert win.cosine_weight(2, 10) == pytest.approx(np.sin(0.2 * np.pi), abs=1e-12)
    assert win.cosine_weight(2, 10) == pytest.approx(0.58779, abs=1e-5)


def test_cosine_weight_symmetry():
    for f in (10, 13, 28):
        t = np.arange(f + 1)
        w = win.cosine_weight(t, f)
        np.testing.assert_allclose(w, w[::-1], atol=1e-12)


def _uniform_posteriors(n, frames, classes):
    return np.full((n, frames, classes), 1.0 / classes)


def test_stitch_identical_distribution_fixed_point():
    d = np.array([0.5, 0.2, 0.3])
    batch = win.slice_clip(np.ones(16000), CFG)
    pw = np.tile(d, (batch.count, 10, 1))
    posts = win.stitch_probs(pw, batch, CFG)
    np.testing.assert_allclose(posts.frames, np.tile(d, (posts.count, 1)), atol=1e-9)


def test_stitch_single_window_identity():
    rng = np.random.default_rng(23)
    batch = win.slice_clip(rng.normal(size=1920), CFG)
    pw = rng.dirichlet(np.ones(4), size=(1, 10))
    posts = win.stitch_probs(pw, batch, CFG)
    assert posts.count == 10
    np.testing.assert_allclose(posts.frames, pw[0], atol=1e-9)


def test_stitch_two_window_overlap_hand_case():
    # two windows, one-hot class 0 vs one-hot class 1
    T = 1280 + 1920
    batch = win.slice_clip(np.ones(T), CFG)
    assert batch.count == 2
    pw = np.zeros((2, 10, 3))
    pw[0, :, 0] = 1.0
    pw[1, :, 1] = 1.0
    posts = win.stitch_probs(pw, batch, CFG)

    # independent reference: direct evaluation of the weighted average
    hop = CFG.frame_hop_samples
    total = posts.count
    ref = np.zeros((total, 3))
    mass = np.zeros(total)
    for k in range(2):
        for t in range(10):
            g = int(round((k * CFG.stride_samples + t * hop) / hop))
            if g >= total:
                continue
            w = max(np.sin(np.pi * t / 10.0), 1e-6)
            ref[g] += w * pw[k, t]
            mass[g] += w
    ref /= ref.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(posts.frames, ref, atol=1e-12)

    # a literal hand value: global frame 6 takes window0 t=6 and window1 t=0
    w0, w1 = np.sin(np.pi * 6 / 10), 1e-6
    np.testing.assert_allclose(posts.frames[6, 0], w0 / (w0 + w1), rtol=1e-9)


def test_stitch_convex_hull_property():
    rng = np.random.default_rng(29)
    batch = win.slice_clip(rng.normal(size=9000), CFG)
    pw = rng.dirichlet(np.ones(5), size=(batch.count, 10))
    posts = win.stitch_probs(pw, batch, CFG)
    np.testing.assert_allclose(posts.frames.sum(axis=1), 1.0, atol=1e-9)
    lo = pw.min(axis=(0, 1)) - 1e-12
    hi = pw.max(axis=(0, 1)) + 1e-12
    assert np.all(posts.frames >= lo) and np.all(posts.frames <= hi)
    assert np.all(posts.weight_mass > 0.0)


def test_stitch_frame_count_near_hop_count():
    rng = np.random.default_rng(31)
    for T in (1920, 5000, 16000, 16001, 30011):
        batch = win.slice_clip(rng.normal(size=T), CFG)
        pw = _uniform_posteriors(batch.count, 10, 4)
        posts = win.stitch_probs(pw, batch, CFG)
        assert abs(posts.count - int(np.ceil(T / CFG.frame_hop_samples))) <= 1


def test_stitch_one_second_frame_count():
    batch = win.slice_clip(np.zeros(16000), CFG)
    posts = win.stitch_probs(_uniform_posteriors(12, 10, 4), batch, CFG)
    assert posts.count in (76, 77)


def test_stitch_is_differentiable():
    rng = np.random.default_rng(37)
    batch = win.slice_clip(rng.normal(size=4000), CFG)
    pw = ad.parameter(rng.dirichlet(np.ones(3), size=(batch.count, 10)))
    frames_t, _ = win.stitch(pw, batch, CFG)
    ad.backward(ad.tsum(ad.mul(frames_t, ad.constant(
        rng.normal(size=frames_t.data.shape)))))
    assert pw.grad is not None and pw.grad.shape == pw.data.shape


def test_stitch_posterior_depends_only_on_overlapping_windows():
    rng = np.random.default_rng(41)
    batch = win.slice_clip(rng.normal(size=16000), CFG)
    pw = rng.dirichlet(np.ones(4), size=(batch.count, 10))
    base = win.stitch_probs(pw, batch, CFG)

    # global frame 20 receives deposits from a known set of windows
    hop = CFG.frame_hop_samples
    contributing = set()
    for k in range(batch.count):
        for t in range(10):
            if int(round((k * CFG.stride_samples + t * hop) / hop)) == 20:
                contributing.add(k)
    altered = pw.copy()
    for k in range(batch.count):
        if k not in contributing:
            altered[k] = rng.dirichlet(np.ones(4), size=10)
    posts = win.stitch_probs(altered, batch, CFG)
    np.testing.assert_allclose(posts.frames[20], base.frames[20], atol=1e-12)


def test_stride_larger_than_window_rejected():
    with pytest.raises(ValueError):
        win.WindowConfig(window_samples=1000, stride_samples=1280)
