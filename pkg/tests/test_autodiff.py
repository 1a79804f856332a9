"""Primitive op correctness: values against closed forms, gradients
against central finite differences."""

import numpy as np
import pytest

from winpho import autodiff as ad
from winpho.errors import ShapeError
from winpho.layers import grad_check


def test_add_mul_backward():
    a = ad.parameter([2.0, 3.0])
    b = ad.parameter([4.0, 5.0])
    out = ad.tsum(ad.mul(ad.add(a, b), a))
    ad.backward(out)
    # d/da (a+b)*a = 2a + b, d/db = a
    np.testing.assert_allclose(a.grad, [8.0, 11.0])
    np.testing.assert_allclose(b.grad, [2.0, 3.0])


def test_broadcast_grad_shapes():
    a = ad.parameter(np.ones((3, 4)))
    b = ad.parameter(np.ones(4))
    out = ad.tsum(ad.add(a, b))
    ad.backward(out)
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, 3.0)


def test_fanout_accumulates():
    x = ad.parameter([1.5])
    y = ad.add(ad.mul(x, x), x)  # x^2 + x
    ad.backward(ad.tsum(y))
    np.testing.assert_allclose(x.grad, [4.0])


def test_gelu_zero():
    assert ad.gelu(ad.Tensor([0.0])).data[0] == 0.0


def test_log_softmax_uniform():
    out = ad.log_softmax(ad.Tensor([1.0, 1.0, 1.0]))
    np.testing.assert_allclose(out.data, np.log(1.0 / 3.0), atol=1e-12)


def test_log_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    out = ad.log_softmax(ad.Tensor(rng.normal(size=(5, 9))), axis=-1)
    np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), 1.0, atol=1e-9)


def test_dropout_identity_cases():
    x = ad.Tensor(np.arange(6.0))
    assert ad.dropout(x, 0.0, training=True, rng=np.random.default_rng(0)) is x
    assert ad.dropout(x, 0.5, training=False) is x


def test_dropout_rate_validation():
    with pytest.raises(ValueError):
        ad.dropout(ad.Tensor([1.0]), 1.0, training=True, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        ad.dropout(ad.Tensor([1.0]), -0.1, training=True, rng=np.random.default_rng(0))


def test_dropout_deterministic_given_seed():
    x = ad.Tensor(np.ones((4, 4)))
    a = ad.dropout(x, 0.5, training=True, rng=np.random.default_rng(11)).data
    b = ad.dropout(x, 0.5, training=True, rng=np.random.default_rng(11)).data
    np.testing.assert_array_equal(a, b)


def test_conv1d_output_lengths_table():
    # kernel/stride/padding rows of the four-stage pyramid
    assert ad.conv1d_out_length(1920, 15, 7, 7) == 275
    assert ad.conv1d_out_length(275, 11, 5, 5) == 55
    assert ad.conv1d_out_length(55, 7, 3, 3) == 19
    assert ad.conv1d_out_length(19, 5, 2, 2) == 10


def test_conv1d_length_property_random_shapes():
    rng = np.random.default_rng(3)
    for _ in range(50):
        L = int(rng.integers(1, 64))
        k = int(rng.integers(1, 12))
        s = int(rng.integers(1, 6))
        p = int(rng.integers(0, 6))
        if L + 2 * p < k:
            continue
        x = ad.Tensor(rng.normal(size=(1, 2, L)))
        w = ad.Tensor(rng.normal(size=(3, 2, k)))
        b = ad.Tensor(np.zeros(3))
        out = ad.conv1d(x, w, b, stride=s, padding=p)
        assert out.data.shape[2] == (L + 2 * p - k) // s + 1


def test_conv1d_zero_input_gives_bias():
    x = ad.Tensor(np.zeros((2, 3, 20)))
    w = ad.Tensor(np.random.default_rng(0).normal(size=(4, 3, 5)))
    b = ad.Tensor([1.0, -2.0, 0.5, 3.0])
    out = ad.conv1d(x, w, b, stride=1, padding=2)
    for c, bias in enumerate(b.data):
        np.testing.assert_allclose(out.data[:, c, :], bias)


def test_conv1d_identity_kernel_backward():
    # single-element kernel with weight 1: grad_x == grad_out
    x = ad.parameter(np.random.default_rng(1).normal(size=(1, 1, 10)))
    w = ad.Tensor(np.ones((1, 1, 1)))
    b = ad.Tensor(np.zeros(1))
    out = ad.conv1d(x, w, b)
    g = np.random.default_rng(2).normal(size=out.data.shape)
    ad.backward(ad.tsum(ad.mul(out, ad.constant(g))))
    np.testing.assert_allclose(x.grad, g)


def test_conv1d_group_isolation():
    rng = np.random.default_rng(5)
    x = ad.parameter(rng.normal(size=(1, 4, 12)))
    w = ad.parameter(rng.normal(size=(4, 2, 3)))
    b = ad.parameter(np.zeros(4))
    out = ad.conv1d(x, w, b, padding=1, groups=2)
    # upstream gradient touches only group-0 output channels
    g = np.zeros_like(out.data)
    g[:, :2, :] = 1.0
    ad.backward(ad.tsum(ad.mul(out, ad.constant(g))))
    np.testing.assert_array_equal(x.grad[:, 2:, :], 0.0)
    np.testing.assert_array_equal(w.grad[2:], 0.0)
    assert np.any(x.grad[:, :2, :] != 0.0)


def test_conv1d_shape_errors():
    x = ad.Tensor(np.zeros((1, 3, 10)))
    w = ad.Tensor(np.zeros((4, 2, 3)))  # expects 2 in-channels per group, g=1
    with pytest.raises(ShapeError):
        ad.conv1d(x, w, ad.Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        ad.conv1d(ad.Tensor(np.zeros((1, 3, 2))), ad.Tensor(np.zeros((4, 3, 7))),
                  ad.Tensor(np.zeros(4)))


def test_batch_norm_constant_input_is_zero():
    x = ad.Tensor(np.tile([[1.0, -3.0]], (4, 1)).reshape(4, 2))
    gamma, beta = ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2))
    rm, rv = np.zeros(2), np.ones(2)
    out = ad.batch_norm(x, gamma, beta, rm, rv, training=True)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_batch_norm_two_sample_closed_form():
    eps = 1e-5
    x = ad.Tensor(np.array([[-1.0], [1.0]]))
    out = ad.batch_norm(x, ad.Tensor(np.ones(1)), ad.Tensor(np.zeros(1)),
                        np.zeros(1), np.ones(1), training=True, eps=eps)
    expected = np.array([[-1.0], [1.0]]) / np.sqrt(1.0 + eps)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_batch_norm_eval_identity():
    rng = np.random.default_rng(9)
    x = ad.Tensor(rng.normal(size=(3, 4, 6)))
    out = ad.batch_norm(x, ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)),
                        np.zeros(4), np.ones(4), training=False, eps=0.0)
    np.testing.assert_allclose(out.data, x.data, atol=1e-12)


def test_batch_norm_batch_of_one_rejected():
    x = ad.Tensor(np.zeros((1, 4, 6)))
    with pytest.raises(ShapeError):
        ad.batch_norm(x, ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)),
                      np.zeros(4), np.ones(4), training=True)


def test_forward_determinism():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(2, 3, 32))
    w = rng.normal(size=(4, 3, 5))

    def run():
        out = ad.conv1d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(np.zeros(4)), stride=2, padding=2)
        out = ad.gelu(out)
        out = ad.dropout(out, 0.3, training=True, rng=np.random.default_rng(99))
        return out.data

    np.testing.assert_array_equal(run(), run())


@pytest.mark.parametrize("op_name", ["exp", "log", "sigmoid", "gelu", "softmax", "log_softmax"])
def test_elementwise_gradients(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**32)
    x = rng.normal(size=(3, 5))
    if op_name == "log":
        x = np.abs(x) + 0.5
    op = getattr(ad, op_name)
    err = grad_check(lambda t: op(t), [ad.Tensor(x)])
    assert err < 1e-5, f"{op_name}: {err}"


def test_matmul_gradient_batched():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 5))
    err = grad_check(lambda x, y: ad.matmul(x, y), [ad.Tensor(a), ad.Tensor(b)])
    assert err < 1e-7


def test_getitem_concat_gradients():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(4, 6))
    err = grad_check(lambda t: ad.concat([t[0:2], t[2:4]], axis=0), [ad.Tensor(x)])
    assert err < 1e-8


def test_layer_norm_gradient():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(3, 8))
    g = rng.normal(size=8)
    b = rng.normal(size=8)
    err = grad_check(lambda t, gg, bb: ad.layer_norm(t, gg, bb),
                     [ad.Tensor(x), ad.Tensor(g), ad.Tensor(b)])
    assert err < 1e-6


def test_batch_norm_gradient_train_mode():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(4, 3, 5))

    def op(t, gg, bb):
        return ad.batch_norm(t, gg, bb, np.zeros(3), np.ones(3), training=True)

    err = grad_check(op, [ad.Tensor(x), ad.Tensor(rng.normal(size=3)),
                          ad.Tensor(rng.normal(size=3))])
    assert err < 1e-6
