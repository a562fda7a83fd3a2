import numpy as np
import pytest

from schyena import autodiff as ad
from schyena.autodiff import Tensor
from schyena.errors import ContractError, DimensionError
from schyena.gradcheck import check_model, max_rel_err


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(a, Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_inner_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_gradient_vs_finite_differences(self, rng):
        a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)

        def loss(_):
            return ad.tensor_sum(ad.matmul(a, b))

        ad.backward(loss(None))
        for t in (a, b):
            fd = ad.finite_diff_grad(loss, t, step=1e-5)
            assert max_rel_err(t.grad, fd) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestElementwise:
    def test_mul_identity(self, rng):
        x = Tensor(rng.uniform(-2, 2, (3, 2)))
        np.testing.assert_array_equal(ad.mul(x, Tensor(np.ones((3, 2)))).data, x.data)

    def test_add_identity(self, rng):
        x = Tensor(rng.uniform(-2, 2, (3, 2)))
        np.testing.assert_array_equal(ad.add(x, Tensor(np.zeros((3, 2)))).data, x.data)

    def test_mul_values(self):
        out = ad.mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0]))
        np.testing.assert_array_equal(out.data, [8.0, 15.0])

    def test_mul_gradients(self, rng):
        a = Tensor(rng.uniform(-2, 2, 5), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, 5), requires_grad=True)
        ad.backward(ad.tensor_sum(ad.mul(a, b)))
        np.testing.assert_allclose(a.grad, b.data)
        np.testing.assert_allclose(b.grad, a.data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


class TestLayerNorm:
    def test_constant_row_maps_to_bias(self):
        x = Tensor(np.full((1, 4), 7.0))
        out = ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = ad.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        expected = (np.array([1.0, 3.0]) - 2.0) / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-12)
        np.testing.assert_allclose(out.data[0], [-1.0, 1.0], atol=1e-5)

    def test_gradient_vs_finite_differences(self, rng):
        x = Tensor(rng.uniform(-2, 2, (3, 5)), requires_grad=True)
        gain = Tensor(rng.uniform(0.5, 1.5, 5), requires_grad=True)
        bias = Tensor(rng.uniform(-0.5, 0.5, 5), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 5)))

        def loss(_):
            return ad.tensor_sum(ad.mul(ad.layer_norm(x, gain, bias), w))

        ad.backward(loss(None))
        for t in (x, gain, bias):
            fd = ad.finite_diff_grad(loss, t, step=1e-5)
            assert max_rel_err(t.grad, fd) < 1e-5


class TestGatherRows:
    def test_single_row(self):
        table = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        np.testing.assert_array_equal(ad.gather_rows(table, [0]).data, [[1.0, 2.0, 3.0]])

    def test_duplicate_rows_accumulate_gradient(self):
        table = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)

        def loss(_):
            return ad.tensor_sum(ad.gather_rows(table, [1, 1]))

        ad.backward(loss(None))
        np.testing.assert_array_equal(table.grad, [[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]])
        fd = ad.finite_diff_grad(loss, table, step=1e-5)
        assert max_rel_err(table.grad, fd) < 1e-6

    def test_empty_index_list(self):
        out = ad.gather_rows(Tensor(np.ones((2, 3))), [])
        assert out.data.shape == (0, 3)

    def test_out_of_range_names_offender(self):
        with pytest.raises(IndexError, match="5"):
            ad.gather_rows(Tensor(np.ones((2, 3))), [0, 5])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
        ad.backward(ad.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((4, 3)))

    def test_quadratic(self, rng):
        x = Tensor(rng.uniform(-2, 2, 6), requires_grad=True)
        ad.backward(ad.tensor_sum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-12)

    def test_full_toy_model_masked_loss(self):
        # every parameter of a 4-gene model, both task losses, vs finite differences
        result = check_model(np.random.default_rng(7), n_genes=4, width=4,
                             n_blocks=1, order=1)
        assert result.passed, f"max rel err {result.error}"

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(ad.mul(x, x))

    def test_fanout_accumulates(self, rng):
        x = Tensor(rng.uniform(-2, 2, 4), requires_grad=True)
        y = ad.add(ad.tensor_sum(ad.mul(x, x)), ad.tensor_sum(x))
        ad.backward(y)
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0, rtol=1e-12)

    def test_linearity(self, rng):
        # grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2) elementwise
        alpha, beta = 0.7, -1.3
        base = rng.uniform(-2, 2, (4, 4))
        w1 = rng.uniform(-1, 1, (4, 4))
        w2 = rng.uniform(-1, 1, (4, 4))

        def build():
            x = Tensor(base.copy(), requires_grad=True)
            l1 = ad.tensor_sum(ad.mul(ad.matmul(x, x), Tensor(w1)))
            l2 = ad.tensor_sum(ad.mul(x, Tensor(w2)))
            return x, l1, l2

        x, l1, l2 = build()
        ad.backward(ad.add(ad.scale(l1, alpha), ad.scale(l2, beta)))
        combined = x.grad.copy()
        x1, l1, _ = build()
        ad.backward(l1)
        x2, _, l2 = build()
        ad.backward(l2)
        np.testing.assert_allclose(combined, alpha * x1.grad + beta * x2.grad, atol=1e-10)

    def test_repeated_forward_bit_identical(self, rng):
        x = Tensor(rng.uniform(-2, 2, (5, 5)))
        w = Tensor(rng.uniform(-1, 1, (5, 5)))
        first = ad.gelu(ad.matmul(x, w)).data
        second = ad.gelu(ad.matmul(x, w)).data
        assert (first == second).all()


class TestFiniteDiff:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.uniform(-2, 2, (2, 3)))
        fd = ad.finite_diff_grad(lambda t: ad.tensor_sum(t), x)
        np.testing.assert_allclose(fd, np.ones((2, 3)), atol=1e-9)

    def test_square_at_three(self):
        x = Tensor([3.0])
        fd = ad.finite_diff_grad(lambda t: ad.tensor_sum(ad.mul(t, t)), x, step=1e-5)
        assert abs(fd[0] - 6.0) < 1e-8

    def test_matches_backward_on_random_graphs(self, rng):
        for _ in range(3):
            x = Tensor(rng.uniform(-2, 2, (3, 3)), requires_grad=True)
            w = Tensor(rng.uniform(-1, 1, (3, 3)))

            def loss(_):
                h = ad.gelu(ad.matmul(x, w))
                return ad.tensor_sum(ad.mul(h, ad.exp(ad.scale(x, 0.3))))

            x.grad = None
            ad.backward(loss(None))
            fd = ad.finite_diff_grad(loss, x, step=1e-5)
            assert max_rel_err(x.grad, fd) < 1e-4

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ContractError):
            ad.finite_diff_grad(lambda t: ad.tensor_sum(t), Tensor([1.0]), step=0.0)
