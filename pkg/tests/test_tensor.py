"""Tensor core: forward semantics, backward correctness, purity."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spcnet import tensor as T
from spcnet.tensor import Tensor, backward, batch_norm


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestLinear:
    def test_identity_weights(self):
        x = rand((4, 3), 1)
        out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weights_give_bias_rows(self):
        x = rand((5, 3), 2)
        out = T.linear(Tensor(x), Tensor(np.zeros((3, 2))), Tensor([1.0, 2.0]))
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0], (5, 1)))

    def test_matches_naive_triple_loop(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.standard_normal((3, 2)), rng.standard_normal((2, 2)), rng.standard_normal(2)
        expected = np.empty((3, 2))
        for i in range(3):
            for j in range(2):
                acc = b[j]
                for k in range(2):
                    acc += x[i, k] * w[k, j]
                expected[i, j] = acc
        out = T.linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, expected, rtol=1e-15)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(3, 2\).*\(3, 2\)"):
            T.linear(Tensor(rand((3, 2))), Tensor(rand((3, 2))), Tensor(np.zeros(2)))


class TestActivation:
    def test_relu_values(self):
        out = T.activation(Tensor([[-1.0, 0.0, 2.0]]), "relu")
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])

    def test_leaky_relu_negative_slope(self):
        out = T.activation(Tensor([[-1.0]]), "leaky_relu", slope=0.2)
        assert out.data[0, 0] == pytest.approx(-0.2)

    def test_tanh_gradient_at_zero_is_one(self):
        x = Tensor(np.zeros((1, 1)), requires_grad=True)
        backward(T.activation(x, "tanh").sum())
        assert x.grad[0, 0] == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="sigmoid"):
            T.activation(Tensor([[1.0]]), "sigmoid")


class TestBatchNorm:
    def test_constant_column_becomes_beta(self):
        x = np.full((6, 2), 3.0)
        gamma, beta = Tensor([2.0, 2.0]), Tensor([1.0, -1.0])
        out = batch_norm(Tensor(x), gamma, beta)
        np.testing.assert_allclose(out.data, np.tile([1.0, -1.0], (6, 1)), atol=1e-12)

    def test_standardized_input_nearly_unchanged(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((200, 3))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_matches_naive_per_column_statistics(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 3))
        gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
        expected = np.empty_like(x)
        for c in range(3):
            col = x[:, c]
            mu = sum(col) / 4.0
            var = sum((v - mu) ** 2 for v in col) / 4.0
            expected[:, c] = gamma[c] * (col - mu) / np.sqrt(var + 1e-5) + beta[c]
        out = batch_norm(Tensor(x), Tensor(gamma), Tensor(beta))
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    def test_single_row_batch_is_guarded(self):
        out = batch_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[0.0, 0.0]], atol=1e-12)

    def test_running_stats_train_then_eval(self):
        rng = np.random.default_rng(6)
        stats = T.RunningStats(3)
        x = rng.standard_normal((8, 3)) * 2.0 + 1.0
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        for _ in range(200):
            batch_norm(Tensor(x), gamma, beta, stats=stats, mode="train")
        out = batch_norm(Tensor(x), gamma, beta, stats=stats, mode="eval")
        np.testing.assert_allclose(stats.mean, x.mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-2)

    def test_eval_without_stats_rejected(self):
        with pytest.raises(ValueError, match="running stats"):
            batch_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]), mode="eval")


class TestReduceMaxRows:
    def test_single_row(self):
        x = rand((1, 4), 7)
        np.testing.assert_array_equal(T.reduce_max_rows(Tensor(x)).data, x[0])

    def test_tie_routes_gradient_to_row_zero(self):
        x = Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]), requires_grad=True)
        backward(T.reduce_max_rows(x).sum())
        np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [0.0, 0.0]])

    def test_matches_naive_scan(self):
        x = rand((5, 4), 8)
        expected = [max(x[:, c]) for c in range(4)]
        np.testing.assert_array_equal(T.reduce_max_rows(Tensor(x)).data, expected)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            T.reduce_max_rows(Tensor(np.empty((0, 3))))


class TestGatherRows:
    def test_identity_permutation(self):
        x = rand((6, 3), 9)
        out = T.gather_rows(Tensor(x), np.arange(6))
        np.testing.assert_array_equal(out.data, x)

    def test_duplicate_index_scatter_adds(self):
        x = Tensor(rand((4, 2), 10), requires_grad=True)
        backward(T.gather_rows(x, [2, 2]).sum())
        np.testing.assert_array_equal(x.grad[2], [2.0, 2.0])
        np.testing.assert_array_equal(x.grad[[0, 1, 3]], 0.0)

    def test_matches_naive_copy(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((8, 3))
        idx = rng.integers(0, 8, size=5)
        expected = np.stack([x[i] for i in idx])
        np.testing.assert_array_equal(T.gather_rows(Tensor(x), idx).data, expected)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            T.gather_rows(Tensor(rand((3, 2))), [3])

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_backward_conserves_gradient_mass(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 10))
        idx = rng.integers(0, n, size=int(rng.integers(1, 15)))
        x = Tensor(rng.standard_normal((n, 3)), requires_grad=True)
        out = T.gather_rows(x, idx)
        upstream = rng.standard_normal(out.shape)
        backward((out * Tensor(upstream)).sum())
        assert x.grad.sum() == pytest.approx(upstream.sum(), rel=1e-12)


class TestConcat:
    def test_single_tensor(self):
        x = rand((3, 2), 12)
        np.testing.assert_array_equal(T.concat([Tensor(x)], axis=0).data, x)

    def test_feature_axis_layout(self):
        a, b = rand((4, 2), 13), rand((4, 3), 14)
        out = T.concat([Tensor(a), Tensor(b)], axis=1)
        assert out.shape == (4, 5)
        np.testing.assert_array_equal(out.data[:, :2], a)
        np.testing.assert_array_equal(out.data[:, 2:], b)

    def test_round_trip_slice_bit_identical(self):
        a, b = rand((4, 2), 15), rand((4, 3), 16)
        joined = T.concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(T.slice_cols(joined, 0, 2).data, a)
        np.testing.assert_array_equal(T.slice_cols(joined, 2, 5).data, b)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="disagree"):
            T.concat([Tensor(rand((3, 2))), Tensor(rand((4, 2)))], axis=1)


class TestBackward:
    def test_constant_loss_leaves_grads_zero(self):
        p = Tensor(rand((3, 2)), requires_grad=True)
        backward(Tensor(5.0))
        assert p.grad is None

    def test_linear_weight_gradient_formula(self):
        # d(sum(X @ W)) / dW[i, j] = sum of column i of X
        x = rand((5, 3), 17)
        w = Tensor(rand((3, 2), 18), requires_grad=True)
        backward(T.linear(Tensor(x), w, Tensor(np.zeros(2))).sum())
        expected = np.tile(x.sum(axis=0)[:, None], (1, 2))
        np.testing.assert_allclose(w.grad, expected, rtol=1e-12)

    def test_two_layer_composition_matches_finite_differences(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((4, 3))
        w1 = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w2 = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def loss_value():
            h = T.activation(T.matmul(Tensor(x), w1), "tanh")
            return T.matmul(h, w2).sum()

        backward(loss_value())
        eps = 1e-6
        for w in (w1, w2):
            flat = w.data.reshape(-1)
            grad = w.grad.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                hi = loss_value().item()
                flat[i] = saved - eps
                lo = loss_value().item()
                flat[i] = saved
                numeric = (hi - lo) / (2 * eps)
                assert abs(grad[i] - numeric) / max(abs(numeric), 1e-8) < 1e-4

    def test_multiple_paths_accumulate(self):
        x = Tensor(np.array([[2.0]]), requires_grad=True)
        backward(((x * 3.0) + (x * 4.0)).sum())
        assert x.grad[0, 0] == 7.0

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(Tensor(np.zeros((2, 2))))


class TestPurityAndMisc:
    def test_forward_ops_are_pure(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.standard_normal((6, 4)))
        w = Tensor(rng.standard_normal((4, 3)))
        b = Tensor(rng.standard_normal(3))
        first = T.relu(T.linear(x, w, b)).data
        second = T.relu(T.linear(x, w, b)).data
        np.testing.assert_array_equal(first, second)

    def test_group_max_rows_tie_to_first_slot(self):
        x = Tensor(np.array([[1.0], [1.0], [0.5], [2.0]]), requires_grad=True)
        out = T.group_max_rows(x, 2)
        np.testing.assert_array_equal(out.data, [[1.0], [2.0]])
        backward(out.sum())
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0], [1.0]])

    def test_group_sum_rows(self):
        x = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
        out = T.group_sum_rows(x, 2)
        np.testing.assert_array_equal(out.data, [[2.0, 4.0], [10.0, 12.0]])
        backward((out * Tensor([[1.0, 2.0], [3.0, 4.0]])).sum())
        np.testing.assert_array_equal(x.grad, [[1, 2], [1, 2], [3, 4], [3, 4]])

    def test_tile_rows_backward_sums_replicas(self):
        x = Tensor(rand((3, 2), 21), requires_grad=True)
        backward(T.tile_rows(x, 4).sum())
        np.testing.assert_array_equal(x.grad, np.full((3, 2), 4.0))

    def test_no_grad_disables_recording(self):
        x = Tensor(rand((2, 2)), requires_grad=True)
        with T.no_grad():
            out = (x * 2.0).sum()
        backward(out)
        assert x.grad is None
