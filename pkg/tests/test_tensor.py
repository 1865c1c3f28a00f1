import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unest import ops
from unest.gradcheck import grad_check
from unest.tensor import (
    Function,
    MissingAdjointError,
    Tensor,
    backward,
    concat,
    default_dtype,
    get_default_dtype,
    no_grad,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        grads = backward(x * x)
        assert grads[x] == pytest.approx(6.0)
        assert x.grad == pytest.approx(6.0)

    def test_sum_of_softmax_has_zero_gradient(self):
        x = leaf(np.random.default_rng(0).normal(size=7))
        ops.softmax(x, -1).sum().backward()
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)

    def test_triple_matmul_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a, b, c = (leaf(rng.normal(size=(4, 4))) for _ in range(3))
        err = grad_check(lambda a, b, c: (a @ b @ c).sum(), [a, b, c], h=1e-5)
        assert err < 1e-4

    def test_fan_out_accumulates(self):
        x = leaf(2.0)
        y = x * 3.0 + x * x + x
        backward(y)
        assert x.grad == pytest.approx(3.0 + 4.0 + 1.0)

    def test_unreached_leaf_gets_zero(self):
        x, unused = leaf([1.0, 2.0]), leaf([5.0, 6.0])
        grads = backward((x * x).sum(), [x, unused])
        np.testing.assert_array_equal(grads[unused], [0.0, 0.0])

    def test_non_scalar_root_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ValueError, match="scalar"):
            backward(x * 2.0)

    def test_missing_adjoint_names_op(self):
        class Forgetful(Function):
            name = "forgetful"

            @staticmethod
            def forward(ctx, a):
                return a * 2

        x = leaf(1.0)
        with pytest.raises(MissingAdjointError, match="forgetful"):
            backward(Forgetful.apply(x))

    def test_repeat_runs_bitwise_identical(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(3, 5))

        def run():
            x = leaf(data.copy())
            (ops.gelu(x @ x.transpose(0, 1)).sum() * 0.5).backward()
            return x.grad

        assert np.array_equal(run(), run())

    def test_no_grad_builds_no_graph(self):
        x = leaf(1.0)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf

    def test_deep_chain_is_iterative(self):
        x = leaf(1.0)
        y = x
        for _ in range(5000):
            y = y + 0.0
        backward(y)
        assert x.grad == 1.0


class TestDtypes:
    def test_default_is_32_bit(self):
        assert get_default_dtype() == np.float32
        assert Tensor([1.0]).dtype == np.float32

    def test_context_switches_to_64_bit(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert get_default_dtype() == np.float32


class TestSoftmax:
    @pytest.mark.parametrize(
        "x, expected",
        [([0.0, 0.0], [0.5, 0.5]), ([math.log(2), 0.0], [2 / 3, 1 / 3]), ([1000.0, 0.0], [1.0, 0.0])],
    )
    def test_values(self, x, expected):
        out = ops.softmax(Tensor(np.array(x), dtype=np.float64), -1).data
        np.testing.assert_allclose(out, expected, atol=1e-12)
        assert np.all(np.isfinite(out))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=9), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, xs, shift):
        x = np.array(xs)
        p = ops.softmax(Tensor(x, dtype=np.float64), -1).data
        q = ops.softmax(Tensor(x + shift, dtype=np.float64), -1).data
        assert abs(p.sum() - 1) < 1e-6
        np.testing.assert_allclose(p, q, atol=1e-6)


class TestRearrangements:
    @settings(max_examples=40, deadline=None)
    @given(st.permutations(range(4)))
    def test_permute_adjoint_is_inverse(self, axes):
        rng = np.random.default_rng(0)
        x = leaf(rng.normal(size=(2, 3, 4, 5)))
        w = rng.normal(size=tuple(x.shape[a] for a in axes))
        (x.permute(*axes) * Tensor(w)).sum().backward()
        np.testing.assert_array_equal(x.grad, np.transpose(w, np.argsort(axes)))

    def test_concat_splits_gradient(self):
        a, b = leaf(np.ones((2, 2))), leaf(np.ones((2, 3)))
        w = np.arange(10.0).reshape(2, 5)
        (concat([a, b], 1) * Tensor(w)).sum().backward()
        np.testing.assert_array_equal(a.grad, w[:, :2])
        np.testing.assert_array_equal(b.grad, w[:, 2:])

    def test_slice_gradient_scatters(self):
        x = leaf(np.zeros(5))
        x[1:4].sum().backward()
        np.testing.assert_array_equal(x.grad, [0, 1, 1, 1, 0])


class TestConvolution:
    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)])
    def test_matches_loop_oracle(self, stride, padding, k):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 5, 7))
        w = rng.normal(size=(4, 3, k, k, k))
        b = rng.normal(size=4)
        got = ops.conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), stride, padding).data
        want = ops.conv3d_reference(x, w, b, stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)

    def test_transpose_is_adjoint_of_conv(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 3, 8, 6, 4))
        y = rng.normal(size=(1, 5, 4, 3, 2))
        w = rng.normal(size=(5, 3, 2, 2, 2))
        t = lambda a: Tensor(a, dtype=np.float64)  # noqa: E731
        lhs = np.sum(ops.conv3d(t(x), t(w), None, 2).data * y)
        rhs = np.sum(x * ops.conv_transpose3d(t(y), t(w), None, 2).data)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_max_pool_ties_take_first(self):
        x = leaf(np.ones((1, 1, 2, 2, 2)))
        ops.max_pool3d(x, 2).sum().backward()
        assert x.grad.sum() == 1 and x.grad[0, 0, 0, 0, 0] == 1


def test_scalar_reductions_keep_64_bit():
    x = Tensor(np.array([0.1, 0.2]), dtype=np.float64)
    assert x.sum().dtype == np.float64
    assert (1.0 - x.mean()).dtype == np.float64
