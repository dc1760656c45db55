"""Tensor/autodiff core: op semantics, tape behavior, FD gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vimshuffle import tensor as T
from vimshuffle.tensor import Tensor, gather_rows, grad_check, layer_norm, matmul


@pytest.fixture(autouse=True)
def debug_checks():
    T.set_debug_checks(True)
    yield
    T.set_debug_checks(False)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        m = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(matmul(eye, m).data, m.data)

    def test_hand_dot_product(self):
        # [1,2] . [3,4] = 11
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_zero_matrix(self):
        z = Tensor(np.zeros((3, 3)))
        m = Tensor(np.arange(9.0).reshape(3, 3))
        assert np.all(matmul(z, m).data == 0)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"3.*2"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast_backward(self):
        a = T.parameter(np.random.default_rng(0).normal(size=(2, 3, 4)), np.float64)
        b = T.parameter(np.random.default_rng(1).normal(size=(4, 5)), np.float64)
        matmul(a, b).sum().backward()
        assert a.grad.shape == a.shape
        assert b.grad.shape == b.shape


class TestElementwise:
    def test_silu_at_zero(self):
        assert T.silu(Tensor([0.0])).data[0] == 0.0

    def test_softplus_at_zero_is_log_two(self):
        import math
        out = T.softplus(Tensor([0.0], dtype=np.float64)).data[0]
        assert out == pytest.approx(math.log(2.0), abs=1e-12)

    def test_exp_at_zero(self):
        assert T.exp(Tensor([0.0])).data[0] == 1.0

    def test_softplus_overflow_branch(self):
        x = Tensor(np.array([25.0, 700.0], dtype=np.float64))
        out = T.softplus(x)
        assert np.array_equal(out.data, x.data)

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(Tensor(np.array([-1e4, 1e4], dtype=np.float64)))
        assert out.data[0] == 0.0 and out.data[1] == 1.0

    def test_broadcast_add_backward_sums(self):
        a = T.parameter(np.zeros((3, 4)), np.float64)
        b = T.parameter(np.zeros(4), np.float64)
        (a + b).sum().backward()
        assert np.all(b.grad == 3.0)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 4)))


class TestLayerNorm:
    def test_constant_vector_maps_to_zeros(self):
        out = layer_norm(Tensor(np.full((2, 5), 3.7)))
        assert np.allclose(out.data, 0.0)

    def test_two_point_example(self):
        # mean 2, std 1 -> normalized [-1, 1]
        out = layer_norm(Tensor(np.array([[1.0, 3.0]]), dtype=np.float64), eps=1e-14)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_already_normalized_nearly_unchanged(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 8))
        x = (x - x.mean(-1, keepdims=True)) / x.std(-1, keepdims=True)
        out = layer_norm(Tensor(x, dtype=np.float64), eps=1e-12)
        assert np.allclose(out.data, x, atol=1e-5)

    def test_moments(self):
        rng = np.random.default_rng(4)
        out = layer_norm(Tensor(rng.normal(size=(6, 16), scale=3.0), dtype=np.float64)).data
        assert np.abs(out.mean(-1)).max() < 1e-6
        assert np.abs(out.var(-1) - 1.0).max() < 1e-4

    def test_empty_axis_rejected(self):
        with pytest.raises(T.ShapeError):
            layer_norm(Tensor(np.ones((2, 0))))


class TestGatherRows:
    def test_identity_is_bitwise(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 5, 3)).astype(np.float32))
        out = gather_rows(x, np.arange(5))
        assert np.array_equal(out.data, x.data)

    def test_reorders_rows(self):
        rows = np.array([[[1.0], [2.0], [3.0]]])  # a, b, c
        out = gather_rows(Tensor(rows), [2, 0, 1])
        assert out.data[0, :, 0].tolist() == [3.0, 1.0, 2.0]  # c, a, b

    def test_all_s3_permutations_brute_force(self):
        import itertools
        x = np.arange(6.0).reshape(1, 3, 2)
        for perm in itertools.permutations(range(3)):
            out = gather_rows(Tensor(x), list(perm))
            expected = np.stack([x[0, p] for p in perm])[None]
            assert np.array_equal(out.data, expected)

    def test_gradient_vs_fd(self):
        x = np.random.default_rng(1).normal(size=(2, 4, 3))
        perm = np.array([3, 1, 0, 2])
        w = Tensor(np.cos(np.arange(24.0)).reshape(2, 4, 3))
        err = grad_check(lambda v: (gather_rows(v, perm) * w).sum(),
                         T.parameter(x, np.float64), 1e-5)
        assert err < 1e-6

    def test_backward_is_inverse_permutation(self):
        x = T.parameter(np.zeros((1, 4, 2)), np.float64)
        perm = np.array([2, 0, 3, 1])
        g = np.arange(8.0).reshape(1, 4, 2)
        out = gather_rows(x, perm)
        (out * Tensor(g)).sum().backward()
        inv = np.empty(4, dtype=int)
        inv[perm] = np.arange(4)
        assert np.array_equal(x.grad, g[:, inv])

    def test_invalid_indices(self):
        x = Tensor(np.ones((1, 3, 2)))
        with pytest.raises(IndexError):
            gather_rows(x, [0, 1, 3])
        with pytest.raises(ValueError):
            gather_rows(x, [0, 1, 1])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = T.parameter(np.random.default_rng(0).normal(size=(3, 3)), np.float64)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 3)))

    def test_half_sum_of_squares(self):
        x = T.parameter(np.random.default_rng(1).normal(size=(4,)), np.float64)
        ((x * x).sum() * 0.5).backward()
        assert np.allclose(x.grad, x.data)

    def test_composite_mlp_vs_fd(self):
        rng = np.random.default_rng(2)
        w1 = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
        w2 = Tensor(rng.normal(size=(5, 2)), dtype=np.float64)

        def f(v):
            h = T.silu(matmul(v, w1))
            return T.softplus(matmul(h, w2)).sum()

        err = grad_check(f, T.parameter(rng.normal(size=(4, 3)), np.float64), 1e-5)
        assert err < 1e-4

    def test_grads_accumulate_until_reset(self):
        x = T.parameter(np.ones(3), np.float64)
        x.sum().backward()
        x.sum().backward()
        assert np.all(x.grad == 2.0)
        x.zero_grad()
        x.sum().backward()
        assert np.all(x.grad == 1.0)

    def test_non_scalar_loss_rejected(self):
        x = T.parameter(np.ones(3), np.float64)
        with pytest.raises(T.ShapeError):
            (x * 2.0).backward()


class TestGradCheck:
    def test_sum_is_exact(self):
        x = T.parameter(np.random.default_rng(0).normal(size=(3,)), np.float64)
        assert grad_check(lambda v: v.sum(), x, 1e-5) < 1e-9

    def test_wrong_backward_negative_control(self):
        def bad_op(t):
            out_data = t.data * 3.0

            def backward(g):
                t.accumulate_grad(g * 5.0)  # wrong on purpose: true factor is 3

            return T._make(out_data, (t,), backward, "bad")

        x = T.parameter(np.random.default_rng(1).normal(size=(4,)), np.float64)
        assert grad_check(lambda v: bad_op(v).sum(), x, 1e-5) > 1e-2


class TestDebugChecks:
    def test_nan_flagged_when_enabled(self):
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            T.log(Tensor(np.array([-1.0])))

    def test_silent_when_disabled(self):
        T.set_debug_checks(False)
        with np.errstate(invalid="ignore"):
            out = T.log(Tensor(np.array([-1.0])))
        assert np.isnan(out.data[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=1024), st.integers(min_value=0, max_value=2 ** 31))
def test_gather_round_trip_bitwise(t_len, seed):
    gen = np.random.default_rng(seed)
    perm = gen.permutation(t_len)
    inv = np.empty(t_len, dtype=np.int64)
    inv[perm] = np.arange(t_len)
    x = Tensor(gen.normal(size=(1, t_len, 2)).astype(np.float32))
    back = gather_rows(gather_rows(x, perm), inv)
    assert np.array_equal(back.data, x.data)


class TestShapeOps:
    def test_narrow_concat_round_trip(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4))
        parts = [T.narrow(x, 1, i, 1) for i in range(3)]
        assert np.array_equal(T.concat(parts, 1).data, x.data)

    def test_scatter_rows_duplicate_rejected(self):
        with pytest.raises(ValueError):
            T.scatter_rows(Tensor(np.ones((1, 2, 3))), [1, 1], 4)

    def test_index_rows_gradient_with_repeats(self):
        x = T.parameter(np.zeros((1, 3, 2)), np.float64)
        T.index_rows(x, [1, 1, 0]).sum().backward()
        assert x.grad[0, 1, 0] == 2.0 and x.grad[0, 0, 0] == 1.0
