"""Autodiff substrate: op semantics, gradients vs finite differences,
freeze/requires_grad contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_grads, numerical_grad
from protoadapt import optim, tensor as T
from protoadapt.errors import NonFiniteError, ShapeError
from protoadapt.tensor import Parameter, Tensor


class TestL2Normalize:
    def test_three_four_five(self):
        out = T.l2_normalize(Tensor([3.0, 4.0]), axis=-1)
        np.testing.assert_allclose(out.numpy(), [0.6, 0.8], atol=1e-7)

    def test_zero_vector_maps_to_zero(self):
        out = T.l2_normalize(Tensor([0.0, 0.0]), axis=-1)
        np.testing.assert_array_equal(out.numpy(), [0.0, 0.0])

    def test_unit_vector_unchanged(self):
        v = np.array([0.6, 0.8], dtype=np.float32)
        out = T.l2_normalize(Tensor(v), axis=-1)
        np.testing.assert_allclose(out.numpy(), v, atol=1e-7)

    def test_unit_norm_along_axis(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 8, 5)) + 0.1
        out = T.l2_normalize(Tensor(x), axis=1).numpy()
        norms = np.sqrt((out**2).sum(axis=1))
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    @given(st.floats(min_value=1e-3, max_value=1e3), st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, scale, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(6).astype(np.float64)
        a = T.l2_normalize(Tensor(x), axis=-1).numpy()
        b = T.l2_normalize(Tensor(scale * x), axis=-1).numpy()
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            T.l2_normalize(Tensor([np.nan, 1.0]), axis=-1)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 5)) + 0.2
        check_grads(lambda t: T.l2_normalize(t, axis=1), [x], [0], rtol=1e-5)

    def test_grad_zero_below_eps(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        T.l2_normalize(x, axis=-1).sum().backward()
        np.testing.assert_array_equal(x.grad, np.zeros(4))


class TestRelu6:
    def test_clamps_top(self):
        assert T.relu6(Tensor([7.0])).numpy()[0] == 6.0

    def test_clamps_bottom(self):
        assert T.relu6(Tensor([-3.0])).numpy()[0] == 0.0

    def test_interior_identity(self):
        assert T.relu6(Tensor([2.5])).numpy()[0] == 2.5

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(100) * 10
        out = T.relu6(Tensor(x)).numpy()
        assert (out >= 0).all() and (out <= 6).all()

    def test_grad_matches_fd_away_from_kinks(self):
        x = np.array([-2.0, 1.0, 3.0, 5.5, 7.0])
        check_grads(T.relu6, [x], [0])

    def test_grad_zero_at_clamp_points(self):
        x = Tensor(np.array([0.0, 6.0]), requires_grad=True)
        T.relu6(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])


class TestArithmetic:
    def test_add_mul_broadcast_grads(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((1, 4))
        check_grads(lambda x, y: x * y + x, [a, b], [0, 1])

    def test_sub_div_scalar(self):
        x = Tensor([2.0, 4.0], requires_grad=True)
        out = (x - 1.0) / 2.0
        out.sum().backward()
        np.testing.assert_allclose(out.numpy(), [0.5, 1.5])
        np.testing.assert_allclose(x.grad, [0.5, 0.5])

    def test_matmul_grads(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((3, 5))
        check_grads(lambda x, y: T.matmul(x, y), [a, b], [0, 1])

    def test_einsum_grads(self):
        rng = np.random.default_rng(2)
        f = rng.standard_normal((2, 3, 4))
        p = rng.standard_normal((2, 3))
        check_grads(lambda x, y: T.einsum("ncp,nc->np", x, y), [f, p], [0, 1])

    def test_einsum_rejects_lost_index(self):
        with pytest.raises(ValueError):
            T.einsum("ab,bc->c", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))

    def test_reductions_and_shape_ops(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 4))
        check_grads(lambda t: T.tsum(t, axis=(1, 2)), [x], [0])
        check_grads(lambda t: T.tmean(t, axis=0), [x], [0])
        check_grads(lambda t: t.reshape(6, 4).transpose(1, 0), [x], [0])
        check_grads(lambda t: t[:, 1:, ::2], [x], [0])

    def test_amax_grad_routes_to_first_argmax(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        T.amax(x, axis=1).sum().backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_concat_grads(self):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
        check_grads(lambda x, y: T.concat([x, y], axis=0), [a, b], [0, 1])


class TestConvAndPool:
    def test_conv2d_matches_explicit_loop(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 3, 5, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(w)).numpy()
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(6):
                        ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum()
        np.testing.assert_allclose(out, ref, atol=1e-4)

    def test_conv2d_grads(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        check_grads(lambda a, b: T.conv2d(a, b), [x, w], [0, 1], rtol=1e-4, atol=1e-6)

    def test_conv2d_shape_validation(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 5, 3, 3))))

    def test_avg_pool_grads(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 4, 6))
        check_grads(T.avg_pool2d, [x], [0])

    def test_avg_pool_values(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = T.avg_pool2d(Tensor(x)).numpy()
        np.testing.assert_allclose(out[0, 0], [[2.5, 4.5], [10.5, 12.5]])


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        logits = Tensor(np.zeros((2, 2, 3, 3)))
        labels = np.zeros((2, 3, 3), dtype=np.int64)
        loss = T.softmax_cross_entropy(logits, labels)
        np.testing.assert_allclose(loss.numpy(), np.log(2.0), rtol=1e-6)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(9)
        z = rng.standard_normal((2, 3, 2, 2))
        labels = rng.integers(0, 3, size=(2, 2, 2))
        check_grads(lambda t: T.softmax_cross_entropy(t, labels), [z], [0], rtol=1e-5)


class TestParameterContracts:
    def test_frozen_param_bit_identical_after_step(self):
        rng = np.random.default_rng(10)
        frozen = Parameter(rng.standard_normal((3, 3)), name="enc.w", frozen=True)
        live = Parameter(rng.standard_normal((3, 3)), name="adapter.w")
        before = frozen.data.tobytes()
        opt = optim.SGD([live], lr=0.1)
        loss = (T.mul(live, 2.0) + frozen.detach()).sum()
        loss.backward()
        opt.step()
        assert frozen.data.tobytes() == before
        assert frozen.grad is None

    def test_frozen_param_rejected_by_optimizer(self):
        p = Parameter(np.ones(3), name="enc.b", frozen=True)
        with pytest.raises(ValueError):
            optim.SGD([p], lr=0.1)

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_grad_accumulates_across_backwards(self):
        x = Tensor(np.ones(3), requires_grad=True)
        (x * 2.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, [5.0, 5.0, 5.0])

    def test_sgd_momentum_weight_decay_recipe(self):
        # One analytic step: v = g + wd*theta; theta' = theta - lr*v.
        p = Parameter(np.array([1.0, -2.0]), name="w")
        p.grad = np.array([0.5, 0.5])
        opt = optim.SGD([p], lr=0.1, momentum=0.9, weight_decay=0.001)
        opt.step()
        np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.501, -2.0 - 0.1 * 0.498])
        p.grad = np.array([0.0, 0.0])
        opt.step()
        np.testing.assert_allclose(
            p.data, [1.0 - 0.1 * 0.501 - 0.1 * (0.9 * 0.501 + 0.0009499),
                     -2.0 - 0.1 * 0.498 - 0.1 * (0.9 * 0.498 - 0.0020498)],
            rtol=1e-6,
        )


def test_numerical_grad_self_check():
    # The FD helper itself must be sane: grad of sum(x^2) is 2x.
    x = np.array([1.0, -2.0, 3.0])
    g = numerical_grad(lambda a: float((a**2).sum()), [x], 0)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-6)
