"""Per-op gradient checks and graph-engine contracts."""

import math

import numpy as np
import numpy.testing as npt
import pytest

import tppkit.autodiff as ad
from tppkit.autodiff import (GraphError, NonFiniteError, Tensor,
                             finite_difference_gradient, gradient_check,
                             gradients)


def check_op(build, *shapes, seed=0, rel_tol=1e-4):
    """FD-check a scalar-valued composite at a random point."""
    rng = np.random.default_rng(seed)
    named = {f"x{i}": Tensor(rng.normal(0.4, 0.8, size=s), True)
             for i, s in enumerate(shapes)}

    def loss():
        return build(*named.values())

    report = gradient_check(loss, named)
    assert report.ok(rel_tol=rel_tol), report.summary()


class TestElementwiseGradients:
    def test_add_mul_broadcast(self):
        check_op(lambda a, b: ((a + b) * (a * 2.0 - b)).sum(), (3, 4), (4,))

    def test_div_power(self):
        check_op(lambda a, b: (a / (b * b + 3.0) + a ** 3.0).sum(), (2, 3), (2, 3))

    def test_exp_log_sqrt(self):
        check_op(lambda a: (ad.log(ad.exp(a) + 1.0) + ad.sqrt(ad.exp(a))).sum(), (5,))

    def test_sigmoid_tanh_relu(self):
        check_op(lambda a: (ad.sigmoid(a) + ad.tanh(a) * ad.relu(a + 0.05)).sum(), (4, 3))

    def test_softplus_betas(self):
        check_op(lambda a: (ad.softplus(a, 1.0) + ad.softplus(a, 2.5)).sum(), (6,))

    def test_clamp_min(self):
        check_op(lambda a: ad.clamp_min(a, 0.1).sum(), (7,))


class TestStructuredGradients:
    def test_matmul_batched(self):
        check_op(lambda a, b: (a @ b).sum(), (2, 3, 4), (4, 5))

    def test_transpose_reshape_concat(self):
        check_op(
            lambda a, b: (ad.concat([ad.transpose(a, (1, 0)), b], axis=1) ** 2.0).sum(),
            (3, 2), (2, 4))

    def test_getitem_gather(self):
        idx = np.array([[0, 2], [1, 1]])
        check_op(lambda a: (ad.gather(a, idx, -1) * a[:, :2]).sum(), (2, 3))

    def test_sum_mean_axes(self):
        check_op(lambda a: (ad.tsum(a, axis=1, keepdims=True)
                            * ad.tmean(a, axis=0, keepdims=True)).sum(), (3, 4))

    def test_row_softmax(self):
        mask = np.zeros((3, 5))
        mask[:, 4] = ad.MASK_NEG
        check_op(lambda a: (ad.row_softmax(a, mask) * np.arange(5.0)).sum(), (3, 5))

    def test_layer_norm(self):
        check_op(lambda a, g, b: (ad.layer_norm(a, g, b) ** 2.0).sum(),
                 (4, 6), (6,), (6,))

    def test_embedding_lookup(self):
        ids = np.array([[0, 2], [1, 2]])
        check_op(lambda t: (ad.embedding_lookup(t, ids) ** 2.0).sum(), (3, 4))

    def test_conv1d_feature(self):
        check_op(lambda a, k: (ad.conv1d_feature(a, k, 2, 0) ** 2.0).sum(),
                 (2, 3, 16), (3,))

    def test_conv1d_feature_padded_stride1(self):
        check_op(lambda a, k: (ad.conv1d_feature(a, k, 1, 2) ** 2.0).sum(),
                 (2, 10), (3,))

    def test_maxpool1d_feature(self):
        check_op(lambda a: (ad.maxpool1d_feature(a, 2, 2) ** 2.0).sum(), (2, 3, 12))

    def test_maxpool_overlapping(self):
        check_op(lambda a: (ad.maxpool1d_feature(a, 3, 1) ** 2.0).sum(), (2, 9))


class TestForwardValues:
    def test_softplus_zero_is_ln2(self):
        assert ad.softplus(Tensor(0.0), 1.0).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_softplus_beta_closed_form(self):
        # (1/beta) * ln(1 + exp(beta x))
        x, beta = 0.7, 2.5
        expected = math.log1p(math.exp(beta * x)) / beta
        assert ad.softplus(Tensor(x), beta).item() == pytest.approx(expected, rel=1e-14)

    def test_masked_softmax_rows(self):
        mask = np.array([[0.0, 0.0, ad.MASK_NEG]])
        out = ad.row_softmax(Tensor(np.zeros((1, 3))), mask).data
        npt.assert_allclose(out, [[0.5, 0.5, 0.0]], rtol=0, atol=0)

    def test_softmax_unmasked_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=(6, 9))
        mask = np.where(rng.random((6, 9)) < 0.4, ad.MASK_NEG, 0.0)
        mask[:, 0] = 0.0
        out = ad.row_softmax(Tensor(scores), mask).data
        assert np.all(out[mask < 0] == 0.0)
        npt.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_conv_pool_shape_arithmetic(self):
        # feature length 256, k=3, s=2, p=0 -> 127; pool 2/2 -> 63
        x = Tensor(np.zeros((1, 256)))
        conv = ad.conv1d_feature(x, Tensor(np.ones(3)), 2, 0)
        assert conv.shape == (1, 127)
        pooled = ad.maxpool1d_feature(conv, 2, 2)
        assert pooled.shape == (1, 63)

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.linspace(-1, 1, 7))
        out = ad.dropout(x, 0.5, np.random.default_rng(0), train=False)
        assert out.data.tobytes() == x.data.tobytes()

    def test_dropout_train_scales_kept_entries(self):
        x = Tensor(np.ones(10_000))
        out = ad.dropout(x, 0.25, np.random.default_rng(3), train=True).data
        assert set(np.round(np.unique(out), 12)) == {0.0, round(1 / 0.75, 12)}
        assert abs(out.mean() - 1.0) < 0.05


class TestBackwardContract:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(4.0).reshape(2, 2), True)
        grads = gradients(x.sum(), {"x": x})
        npt.assert_array_equal(grads["x"], np.ones((2, 2)))

    def test_chain_rule_closed_form(self):
        # d/dw softplus(w * x) at w=0, x=1 is sigmoid(0) = 0.5
        w = Tensor(0.0, True)
        loss = ad.softplus(w * 1.0, 1.0)
        grads = gradients(loss, {"w": w})
        assert grads["w"] == pytest.approx(0.5, abs=1e-15)

    def test_untouched_leaves_get_zeros(self):
        x = Tensor(np.ones(3), True)
        unused = Tensor(np.ones((2, 2)), True)
        grads = gradients(x.sum(), {"x": x, "unused": unused})
        npt.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), True)
        with pytest.raises(GraphError):
            gradients(x * 2.0, {"x": x})

    def test_cycle_detected(self):
        x = Tensor(1.0, True)
        y = x * 2.0
        y._parents.append((y, lambda g: g))  # corrupt the graph on purpose
        with pytest.raises(GraphError):
            gradients(y, {"x": x})

    def test_backward_accumulates_into_grad(self):
        x = Tensor(np.ones(2), True)
        (x * 3.0).sum().backward()
        npt.assert_array_equal(x.grad, [3.0, 3.0])

    def test_finite_difference_matches_manual(self):
        x = Tensor(np.array([2.0]), True)

        def f():
            return float(x.data[0] ** 3)

        fd = finite_difference_gradient(f, x)
        assert fd[0] == pytest.approx(12.0, rel=1e-7)


class TestErrorStates:
    def test_overflow_raises(self):
        with pytest.raises(NonFiniteError):
            ad.exp(Tensor(1000.0))

    def test_log_nonpositive_raises(self):
        with pytest.raises(NonFiniteError):
            ad.log(Tensor(np.array([1.0, 0.0])))

    def test_matmul_requires_matrices(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.ones(3)), Tensor(np.ones(3)))

    def test_no_grad_suppresses_recording(self):
        x = Tensor(np.ones(3), True)
        with ad.no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad and y._parents == []
