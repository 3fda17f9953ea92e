import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hykey.autodiff as ad
from hykey.autodiff import NonFiniteError, ShapeError, Tape, Tensor

from helpers import gradcheck

rng = np.random.default_rng(711101)


def randn(*shape):
    return rng.standard_normal(shape)


class TestForward:
    def test_defaults_to_float32(self):
        t = Tensor([1.0, 2.0])
        assert t.dtype == np.float32

    def test_float64_preserved(self):
        t = Tensor(np.zeros(3, dtype=np.float64))
        assert t.dtype == np.float64

    def test_add_broadcast(self):
        a, b = randn(3, 1, 4), randn(5, 1)
        out = Tensor(a) + Tensor(b)
        np.testing.assert_allclose(out.data, a + b, rtol=1e-6)

    def test_scalar_operand_coerced(self):
        out = 2.0 * Tensor([1.0, 2.0]) + 1.0
        np.testing.assert_allclose(out.data, [3.0, 5.0])

    def test_matmul_shape_guard(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(randn(2, 3)), Tensor(randn(4, 2)))

    def test_softmax_rows_sum_to_one(self):
        s = ad.softmax(Tensor(randn(4, 7)), axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(4), rtol=1e-6)

    @given(shift=st.floats(-50, 50))
    @settings(max_examples=25, deadline=None)
    def test_softmax_shift_invariant(self, shift):
        x = np.array([[0.3, -1.2, 2.0, 0.0]])
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + shift)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_sigmoid_saturates_without_overflow(self):
        s = ad.sigmoid(Tensor(np.array([-100.0, 0.0, 100.0])))
        np.testing.assert_allclose(s.data, [0.0, 0.5, 1.0], atol=1e-12)

    def test_l2_normalize_unit_norm(self):
        v = ad.l2_normalize(Tensor(np.array([[3.0, 4.0]])))
        np.testing.assert_allclose(v.data, [[0.6, 0.8]], rtol=1e-6)

    def test_l2_normalize_zero_vector_warns(self):
        with pytest.warns(ad.ZeroNormWarning):
            v = ad.l2_normalize(Tensor(np.zeros((1, 4))))
        np.testing.assert_array_equal(v.data, np.zeros((1, 4)))

    def test_huber_closed_form(self):
        x = Tensor(np.array([0.5, 2.0, -3.0]))
        out = ad.huber(x, delta=1.0)
        np.testing.assert_allclose(out.data, [0.125, 1.5, 2.5], rtol=1e-6)

    def test_huber_rejects_bad_delta(self):
        with pytest.raises(ValueError):
            ad.huber(Tensor([1.0]), delta=0.0)

    @pytest.mark.parametrize("fn", [ad.relu, ad.sigmoid, ad.softmax, ad.l2_normalize])
    def test_nonfinite_rejected(self, fn):
        with pytest.raises(NonFiniteError):
            fn(Tensor(np.array([1.0, np.nan])))

    def test_huber_nonfinite_rejected(self):
        with pytest.raises(NonFiniteError):
            ad.huber(Tensor(np.array([np.inf])), delta=1.0)


class TestTapeMechanics:
    def test_no_tape_no_recording(self):
        x = Tensor(randn(3), requires_grad=True)
        y = x * 2.0
        assert y._tape is None and not y.requires_grad

    def test_tape_scoped_recording(self):
        x = Tensor(randn(3), requires_grad=True)
        with Tape() as tape:
            y = (x * x).sum()
        z = x.sum()  # outside: not recorded
        assert len(tape) == 2
        assert z._tape is None

    def test_requires_grad_false_not_tracked(self):
        x = Tensor(randn(3))
        with Tape() as tape:
            (x * 2.0).sum()
        assert len(tape) == 0

    def test_backward_requires_scalar(self):
        x = Tensor(randn(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_reuse_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            y = (x * x).sum() + (2.0 * x).sum()
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [8.0], rtol=1e-6)

    def test_detach_blocks_gradient(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            y = (x.detach() * x).sum()
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [2.0], rtol=1e-6)

    def test_tensor_backward_method(self):
        x = Tensor(np.array([4.0]), requires_grad=True)
        with Tape():
            y = ad.sqrt(x).sum()
        y.backward()
        np.testing.assert_allclose(x.grad, [0.25], rtol=1e-6)

    def test_zero_grads(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with Tape() as tape:
            y = (x * x).sum()
        tape.backward(y)
        ad.zero_grads([x])
        assert x.grad is None


class TestGradients:
    def test_add_sub_broadcast(self):
        gradcheck(lambda a, b: (a + b - a * 0.5).sum(), randn(3, 1, 4), randn(5, 1))

    def test_mul_div(self):
        gradcheck(lambda a, b: (a * b / (b * b + 2.0)).sum(), randn(4, 3), randn(3) + 3.0)

    def test_power(self):
        gradcheck(lambda a: (a**3).sum(), randn(5) + 2.5)

    def test_matmul(self):
        gradcheck(lambda a, b: (a @ b).sum(), randn(3, 4), randn(4, 2))

    def test_reshape_transpose(self):
        proj = randn(2, 6)
        gradcheck(lambda a: (a.reshape(6, 2).transpose(1, 0) * proj).sum(), randn(3, 4))

    def test_getitem_slice(self):
        gradcheck(lambda a: (a[1:, ::2] ** 2).sum(), randn(4, 6))

    def test_getitem_fancy_repeated_rows(self):
        idx = np.array([0, 2, 2, 1])
        proj = randn(4, 3)
        gradcheck(lambda a: (a[idx] * proj).sum(), randn(3, 3))

    def test_getitem_boolean_mask(self):
        mask = np.array([True, False, True, True])
        gradcheck(lambda a: (a[mask] ** 2).sum(), randn(4, 2))

    def test_concat_stack(self):
        c = randn(2, 5)

        def fn(a, b):
            cat = ad.concat([a, b], axis=1)
            st_ = ad.stack([cat, cat * 2.0], axis=0)
            return (st_ * np.concatenate([c, c * 3.0], axis=0).reshape(2, 2, 5)).sum()

        gradcheck(fn, randn(2, 3), randn(2, 2))

    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, True), ((0, 2), False), (-1, True)])
    def test_reductions(self, axis, keepdims):
        gradcheck(lambda a: (a.sum(axis, keepdims) ** 2).sum(), randn(2, 3, 4))
        gradcheck(lambda a: (a.mean(axis, keepdims) ** 2).sum(), randn(2, 3, 4))

    def test_exp_log_sqrt(self):
        gradcheck(lambda a: (ad.exp(a) + ad.log(a + 4.0) + ad.sqrt(a + 4.0)).sum(), randn(6))

    def test_clip(self):
        # stay away from the clip boundaries: kinks are not differentiable
        x = np.array([-2.0, -0.4, 0.3, 1.7])
        gradcheck(lambda a: (ad.clip(a, -1.0, 1.0) ** 2).sum(), x)

    def test_relu(self):
        x = randn(24)
        x = x[np.abs(x) > 2e-2][:12]
        gradcheck(lambda a: (ad.relu(a) * np.arange(1.0, len(x) + 1)).sum(), x)

    def test_sigmoid(self):
        proj = randn(7)
        gradcheck(lambda a: (ad.sigmoid(a) * proj).sum(), randn(7))

    def test_softmax(self):
        proj = randn(3, 5)
        gradcheck(lambda a: (ad.softmax(a, axis=-1) * proj).sum(), randn(3, 5))

    def test_l2_normalize(self):
        proj = randn(3, 4)
        gradcheck(lambda a: (ad.l2_normalize(a, axis=-1) * proj).sum(), randn(3, 4) + 0.5)

    def test_huber_both_regimes(self):
        x = np.array([0.3, -0.6, 1.8, -2.5])  # clear of |x| == delta
        gradcheck(lambda a: ad.huber(a, delta=1.0).sum(), x)

    def test_composite_hand_derivative(self):
        # f(x) = sum(sigmoid(w x)); df/dx_i = w_i s_i (1 - s_i)
        x = randn(5)
        w = randn(5)
        t = Tensor(x, requires_grad=True)
        with Tape() as tape:
            y = ad.sigmoid(t * w).sum()
        tape.backward(y)
        s = 1.0 / (1.0 + np.exp(-(w * x).astype(np.float64)))
        np.testing.assert_allclose(t.grad, w * s * (1 - s), rtol=1e-4, atol=1e-6)
