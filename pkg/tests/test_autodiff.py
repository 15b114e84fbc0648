import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from con2em import autodiff as ad
from con2em.autodiff import Adam, AdamState, Tensor, adam_step

from conftest import autodiff_grad, numeric_grad, rel_err


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_row_times_column(self):
        assert ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_gradient_matches_finite_differences(self):
        b = np.array([[3.0], [4.0]])
        f_np = lambda a: float((a @ b).sum())
        g = autodiff_grad(lambda a: ad.matmul(a, Tensor(b)).sum(), np.array([[1.0, 2.0]]))
        expected = numeric_grad(f_np, np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(expected, [[3.0, 4.0]], atol=1e-8)
        np.testing.assert_allclose(g, [[3.0, 4.0]])

    def test_both_operand_gradients(self, rng):
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        ad.square(a @ b).sum().backward()
        assert rel_err(a.grad, numeric_grad(lambda x: float(((x @ b0) ** 2).sum()), a0)) < 1e-6
        assert rel_err(b.grad, numeric_grad(lambda x: float(((a0 @ x) ** 2).sum()), b0)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestElementwise:
    def test_exp(self):
        np.testing.assert_allclose(ad.exp(Tensor([0.0, math.log(2)])).data, [1.0, 2.0])

    def test_relu(self):
        assert ad.relu(Tensor([-1.0, 0.0, 3.0])).data.tolist() == [0.0, 0.0, 3.0]

    def test_square_gradient(self):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(numeric_grad(lambda v: float((v**2).sum()), x), [2, 4, 6], atol=1e-8)
        np.testing.assert_allclose(autodiff_grad(lambda t: ad.square(t).sum(), x), [2, 4, 6])

    @pytest.mark.parametrize("op,bad", [(ad.log, [1.0, 0.0]), (ad.log, [-1.0]), (ad.sqrt, [-0.5])])
    def test_domain_errors(self, op, bad):
        with pytest.raises(ad.DomainError):
            op(Tensor(bad))

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            Tensor(np.ones(2)) + Tensor(np.ones(3))

    def test_scalar_operand(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * Tensor(3.0) + 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    @pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
    def test_binary_gradients(self, name, rng):
        op = getattr(ad, name)
        a0, b0 = rng.uniform(0.5, 2, (3, 2)), rng.uniform(0.5, 2, (3, 2))
        np_op = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}[name]
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        ad.square(op(a, b)).sum().backward()
        assert rel_err(a.grad, numeric_grad(lambda x: float((np_op(x, b0) ** 2).sum()), a0)) < 1e-6
        assert rel_err(b.grad, numeric_grad(lambda x: float((np_op(a0, x) ** 2).sum()), b0)) < 1e-6

    @pytest.mark.parametrize("name", ["exp", "log", "relu", "sqrt"])
    def test_unary_gradients(self, name, rng):
        x0 = rng.uniform(0.3, 2.0, (2, 3)) * rng.choice([1, -1], (2, 3)) if name == "relu" else rng.uniform(0.3, 2.0, (2, 3))
        g = autodiff_grad(lambda t: (getattr(ad, name)(t) * 1.7).sum(), x0)
        np_f = {"exp": np.exp, "log": np.log, "relu": lambda v: np.maximum(v, 0), "sqrt": np.sqrt}[name]
        assert rel_err(g, numeric_grad(lambda v: float((np_f(v) * 1.7).sum()), x0)) < 1e-6

    def test_broadcast_bias_gradient(self, rng):
        x0, b0 = rng.normal(size=(4, 3)), rng.normal(size=3)
        b = Tensor(b0, requires_grad=True)
        ad.square(Tensor(x0) + b).sum().backward()
        np.testing.assert_allclose(b.grad, 2 * (x0 + b0).sum(axis=0))


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        loss = ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [[1.0, 0.0]])
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_saturated_is_stable(self):
        loss = ad.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [[1.0, 0.0]])
        assert np.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_three_classes(self):
        expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
        loss = ad.softmax_cross_entropy(Tensor([[1.0, 2.0, 3.0]]), [[0, 0, 1.0]])
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        assert loss.item() == pytest.approx(0.40761, abs=1e-5)

    def test_gradient_is_softmax_minus_target_over_batch(self, rng):
        z0 = rng.normal(size=(3, 4))
        t = rng.dirichlet(np.ones(4), 3)
        g = autodiff_grad(lambda z: ad.softmax_cross_entropy(z, t), z0)
        soft = np.exp(z0) / np.exp(z0).sum(1, keepdims=True)
        np.testing.assert_allclose(g, (soft - t) / 3, atol=1e-14)

    def test_rejects_unnormalized_targets(self):
        with pytest.raises(ad.ValidationError):
            ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [[0.7, 0.7]])


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        x.sum().backward()
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_self_product(self):
        x = Tensor([2.0], requires_grad=True)
        (x * x).sum().backward()
        assert x.grad.tolist() == [4.0]

    def test_accumulates_without_zeroing(self):
        x = Tensor([2.0], requires_grad=True)
        (x * x).sum().backward()
        (x * x).sum().backward()
        assert x.grad.tolist() == [8.0]

    def test_rejects_non_scalar(self):
        with pytest.raises(ad.DimensionError):
            (Tensor([1.0, 2.0], requires_grad=True) * 2.0).backward()

    def test_shared_subexpression_visited_once(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        (y + y + y).sum().backward()
        assert x.grad.tolist() == [18.0]

    def test_linearity(self, rng):
        x0 = rng.normal(size=(3, 3))
        l1 = lambda t: ad.exp(t * 0.3).sum()
        l2 = lambda t: ad.square(t @ Tensor(x0.T)).sum()
        g1, g2 = autodiff_grad(l1, x0), autodiff_grad(l2, x0)
        g12 = autodiff_grad(lambda t: l1(t) * 2.5 + l2(t) * -0.75, x0)
        np.testing.assert_allclose(g12, 2.5 * g1 - 0.75 * g2, rtol=1e-12, atol=1e-12)

    def test_deterministic(self, rng):
        x0 = rng.normal(size=(4, 4))

        def run():
            x = Tensor(x0, requires_grad=True)
            loss = ad.softmax_cross_entropy(ad.relu(x @ x), np.full((4, 4), 0.25))
            loss.backward()
            return loss.data.tobytes(), x.grad.tobytes()

        assert run() == run()

    @given(hnp.arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
    @settings(max_examples=30, deadline=None)
    def test_composite_graph_matches_finite_differences(self, x0):
        w = np.array([[0.5, -1.0, 2.0], [1.5, 0.3, -0.7]])

        def f(t):
            h = ad.exp(ad.matmul(t, Tensor(w)) * 0.5)
            return ad.softmax_cross_entropy(h, np.full((3, 3), 1 / 3)) + ad.square(t).mean()

        def f_np(v):
            return f(Tensor(v)).item()

        assert rel_err(autodiff_grad(f, x0), numeric_grad(f_np, x0)) < 1e-4


class TestShapeOps:
    def test_getitem_with_repeated_rows(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        x[np.array([0, 0, 2])].sum().backward()
        np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])

    def test_stack_and_concat(self, rng):
        a0, b0 = rng.normal(size=3), rng.normal(size=3)
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        (ad.stack([a, b]) * Tensor([[1.0], [2.0]])).sum().backward()
        np.testing.assert_array_equal(a.grad, np.ones(3))
        np.testing.assert_array_equal(b.grad, 2 * np.ones(3))
        c = ad.concat([a.reshape(1, 3), b.reshape(1, 3)])
        assert c.shape == (2, 3)

    def test_mean_axis(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        m = x.mean(axis=0)
        np.testing.assert_allclose(m.data, [1.5, 2.5, 3.5])
        m.sum().backward()
        np.testing.assert_allclose(x.grad, np.full((2, 3), 0.5))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = np.array([1.0, -2.0])
        state = AdamState([p.shape], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        for _ in range(5):
            adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p, [1.0, -2.0])
        assert state.step == 5

    def test_first_step_moves_by_lr(self):
        p = np.array([0.0])
        state = AdamState([p.shape], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        adam_step([p], [np.array([1.0])], state)
        assert p[0] == pytest.approx(-0.1, rel=1e-6)

    def test_quadratic_bowl_converges(self):
        target = np.array([1.5, -0.5])
        x = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([x], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            ad.square(x - target).sum().backward()
            opt.step()
        assert np.linalg.norm(x.data - target) < 1e-3

    def test_shape_mismatch(self):
        state = AdamState([(2,)], lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        with pytest.raises(ad.DimensionError):
            adam_step([np.zeros(2)], [np.zeros(3)], state)
