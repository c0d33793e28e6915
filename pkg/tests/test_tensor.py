"""Tensor core: gradients verified against central finite differences."""

import numpy as np
import pytest

from qdmr import tensor as T
from qdmr.tensor import Tensor


@pytest.fixture(autouse=True)
def _float64():
    T.set_default_dtype("float64")
    yield
    T.set_default_dtype("float64")


def check(f, x, tol=1e-4):
    report = T.grad_check(f, x, step=1e-5, tol=tol)
    assert report.passed, f"max rel err {report.max_rel_err:.3e} > {tol}"


class TestElementwiseGradients:
    """Every primitive against central differences at step 1e-5."""

    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_add_sub_mul_div(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(3, 4)) + 3.0  # keep divisors away from 0
        check(lambda x: ((x + b) * 2.0).sum(), a)
        check(lambda x: (x - b).mean(), a)
        check(lambda x: (x * b).sum(), a)
        check(lambda x: (x / b).sum(), a)
        check(lambda x: (Tensor(a) / x).sum(), b)

    def test_broadcast_row_and_scalar(self):
        a = self.rng.normal(size=(3, 4))
        row = self.rng.normal(size=4)
        check(lambda x: (x + row).sum(), a)
        check(lambda x: (Tensor(a) * x).sum(), row)
        check(lambda x: (x * 0.5 + 1.0).sum(), a)

    def test_unary(self):
        a = self.rng.normal(size=(2, 5)) * 2.0
        check(lambda x: T.relu(x).sum(), a + 0.3)  # keep off the kink
        check(lambda x: T.abs_(x).sum(), a + 0.1)
        check(lambda x: T.exp(x).sum(), a)
        check(lambda x: T.log(x).sum(), np.abs(a) + 0.5)
        check(lambda x: T.sin(x).sum(), a)
        check(lambda x: T.cos(x).sum(), a)
        check(lambda x: T.sigmoid(x).sum(), a)
        check(lambda x: T.softplus(x).sum(), a)
        check(lambda x: (-x).sum(), a)

    def test_minimum_maximum(self):
        a = self.rng.normal(size=(4, 3))
        b = self.rng.normal(size=(4, 3))
        check(lambda x: T.minimum(x, b).sum(), a)
        check(lambda x: T.maximum(Tensor(a), x).sum(), b)

    def test_min_max_tie_routes_to_first_operand(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.minimum(a, b).sum())
        np.testing.assert_array_equal(a.grad, [1.0, 1.0])
        np.testing.assert_array_equal(b.grad, [0.0, 0.0])
        a.zero_grad(), b.zero_grad()
        T.backward(T.maximum(a, b).sum())
        np.testing.assert_array_equal(a.grad, [1.0, 1.0])
        np.testing.assert_array_equal(b.grad, [0.0, 0.0])

    def test_clip_gradient_zero_outside(self):
        a = Tensor([-2.0, 0.5, 3.0], requires_grad=True)
        T.backward(T.clip(a, 0.0, 1.0).sum())
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])


class TestStructuralGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_matmul(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(4, 2))
        check(lambda x: (x @ Tensor(b)).sum(), a)
        check(lambda x: (Tensor(a) @ x).sum(), b)

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))

    def test_transpose_reshape(self):
        a = self.rng.normal(size=(3, 4))
        check(lambda x: (x.T @ Tensor(np.ones((3, 1)))).sum(), a)
        check(lambda x: x.reshape((12,)).sum(), a)

    def test_concat_and_split_gradients(self):
        a = self.rng.normal(size=(2, 3))
        b = self.rng.normal(size=(4, 3))
        check(lambda x: T.concat([x, Tensor(b)], axis=0).sum(), a)
        check(lambda x: T.concat([Tensor(a.T), x], axis=1).sum(), b.T)

    def test_getitem_slices(self):
        a = self.rng.normal(size=(5, 4))
        check(lambda x: x[1:4].sum(), a)
        check(lambda x: x[:, 2].sum(), a)
        check(lambda x: x[3].sum(), a)

    def test_take_accumulates_duplicates(self):
        a = Tensor(np.arange(4.0), requires_grad=True)
        out = T.take(a, [1, 1, 3]).sum()
        T.backward(out)
        np.testing.assert_array_equal(a.grad, [0.0, 2.0, 0.0, 1.0])

    def test_reductions(self):
        a = self.rng.normal(size=(3, 4))
        check(lambda x: x.sum(), a)
        check(lambda x: x.mean(), a)
        check(lambda x: T.exp(x.sum(axis=0)).sum(), a)
        check(lambda x: T.exp(x.mean(axis=1)).sum(), a)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = rng.normal(size=(4, 6)) * rng.uniform(0.1, 30)
            y = T.softmax_lastdim(Tensor(x)).data
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
            assert np.isfinite(y).all()

    def test_masked_positions_exactly_zero(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 5))
        mask = np.array([True, False, True, True, False])
        y = T.softmax_lastdim(Tensor(x), mask).data
        assert (y[:, ~mask] == 0.0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)

    def test_fully_masked_row_raises(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(T.MaskError):
            T.softmax_lastdim(x, mask)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        mask = np.array([True, True, False, True, True])
        check(lambda t: (T.softmax_lastdim(t) * w).sum(), x)
        check(lambda t: (T.softmax_lastdim(t, mask) * w).sum(), x)

    def test_extreme_logits_stay_finite(self):
        x = Tensor(np.array([[1e4, -1e4, 0.0]]))
        y = T.softmax_lastdim(x).data
        assert np.isfinite(y).all()
        np.testing.assert_allclose(y[0, 0], 1.0)


class TestLayerNorm:
    def test_forward_matches_numpy(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 8))
        g = rng.normal(size=8)
        b = rng.normal(size=8)
        got = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=1e-5).data
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        want = (x - mu) / np.sqrt(var + 1e-5) * g + b
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_gradients_all_three_inputs(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 6))
        g = rng.normal(size=6)
        b = rng.normal(size=6)
        w = rng.normal(size=(3, 6))
        check(lambda t: (T.layer_norm(t, Tensor(g), Tensor(b)) * w).sum(), x)
        check(lambda t: (T.layer_norm(Tensor(x), t, Tensor(b)) * w).sum(), g)
        check(lambda t: (T.layer_norm(Tensor(x), Tensor(g), t) * w).sum(), b)


class TestComposites:
    def test_logsumexp_matches_naive(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 7)) * 5
        got = T.logsumexp_lastdim(Tensor(x)).data
        want = np.log(np.exp(x).sum(-1))
        np.testing.assert_allclose(got, want, atol=1e-12)
        big = T.logsumexp_lastdim(Tensor(np.array([1e3, 1e3 + 1.0]))).data
        assert np.isfinite(big).all()

    def test_logsumexp_gradient(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(3, 4))
        check(lambda t: T.logsumexp_lastdim(t).sum(), x)

    def test_inverse_sigmoid_roundtrip_and_clamp(self):
        x = np.array([0.2, 0.5, 0.9])
        y = T.inverse_sigmoid(Tensor(x)).data
        np.testing.assert_allclose(T._sigmoid_np(y), x, atol=1e-12)
        extreme = T.inverse_sigmoid(Tensor(np.array([0.0, 1.0]))).data
        assert np.isfinite(extreme).all()

    def test_inverse_sigmoid_gradient(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0.05, 0.95, size=6)
        check(lambda t: T.inverse_sigmoid(t).sum(), x)

    def test_dropout_rate_zero_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = T.dropout(x, 0.0, np.random.default_rng(0))
        assert out is x

    def test_dropout_scales_kept_entries(self):
        rng = np.random.default_rng(12)
        x = Tensor(np.ones((100, 10)), requires_grad=True)
        out = T.dropout(x, 0.5, rng)
        vals = np.unique(out.data)
        assert set(vals.tolist()) <= {0.0, 2.0}
        T.backward(out.sum())
        np.testing.assert_array_equal(x.grad, out.data)


class TestTapeSemantics:
    def test_backward_on_leaf_gives_one(self):
        x = Tensor(3.0, requires_grad=True)
        T.backward(x)
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_constant_loss_writes_nothing(self):
        x = Tensor(3.0)
        T.backward(x)
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(x)

    def test_repeated_backward_accumulates(self):
        with T.tape_scope():
            x = Tensor(2.0, requires_grad=True)
            y = x * x
            T.backward(y)
            np.testing.assert_allclose(x.grad, 4.0)
            T.backward(y)
            np.testing.assert_allclose(x.grad, 8.0)

    def test_unreachable_leaf_keeps_zero_grad(self):
        with T.tape_scope():
            x = Tensor(1.0, requires_grad=True)
            y = Tensor(1.0, requires_grad=True)
            T.backward(x * 3.0)
            np.testing.assert_array_equal(y.grad, 0.0)

    def test_shared_subexpression_fans_in(self):
        # z = x*x + x*x reuses the same intermediate twice
        with T.tape_scope():
            x = Tensor(3.0, requires_grad=True)
            s = x * x
            T.backward(s + s)
            np.testing.assert_allclose(x.grad, 12.0)

    def test_same_tensor_twice_in_one_op(self):
        with T.tape_scope():
            x = Tensor(5.0, requires_grad=True)
            T.backward(x * x)
            np.testing.assert_allclose(x.grad, 10.0)

    def test_no_grad_suppresses_recording(self):
        with T.tape_scope():
            x = Tensor(2.0, requires_grad=True)
            with T.no_grad():
                y = x * x
            assert not y.requires_grad

    def test_reset_tape_clears_history(self):
        with T.tape_scope():
            x = Tensor(2.0, requires_grad=True)
            y = x * x
            T.reset_tape()
            T.backward(y)
            np.testing.assert_array_equal(x.grad, 0.0)

    def test_grad_present_iff_requires_grad(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        b = Tensor(np.zeros(3))
        assert a.grad is not None and b.grad is None

    def test_rank_limit(self):
        with pytest.raises(T.ShapeError):
            Tensor(np.zeros((1, 1, 1, 1)))


class TestGradCheckHarness:
    def test_constant_function_passes_with_zero_error(self):
        report = T.grad_check(lambda x: Tensor(1.5), np.zeros(4))
        assert report.passed and report.max_rel_err == 0.0

    def test_detects_wrong_gradient(self):
        # forward of x**2 paired with the gradient of x: must fail
        def bad(x):
            out = Tensor(x.data ** 2)
            return T._record(out, (x,), lambda g: (g,)).sum()

        report = T.grad_check(bad, np.full(3, 2.0))
        assert not report.passed


class TestDtypeSwitch:
    def test_float32_mode(self):
        T.set_default_dtype("float32")
        x = Tensor(np.ones(3))
        assert x.data.dtype == np.float32
        assert T.get_default_dtype() == "float32"
        T.set_default_dtype("float64")

    def test_unknown_dtype_rejected(self):
        with pytest.raises(ValueError):
            T.set_default_dtype("float16")
