"""
Tests for the tensor engine: forward values, gradients against finite differences
"""
import numpy as np
import pytest

from hybridtower.autograd.gradcheck import gradient_check, numerical_gradient, relative_error
from hybridtower.autograd.nn import MultiHeadAttention, causal_mask
from hybridtower.autograd.tensor import (
    Parameter, Tensor, check_finite, concat, l2_normalize, layer_norm, log_softmax, matmul, no_grad,
    quick_gelu, softmax,
)
from hybridtower.errors import ConfigError, NumericError, ShapeError, UsageError

TOLERANCE = 1e-4


def _param(rng, *shape):
    return Parameter(rng.normal(size=shape))


def _assert_grads(fn, named):
    errors = gradient_check(fn, named)
    for name, err in errors.items():
        assert err < TOLERANCE, f"{name}: relative error {err:.2e}"


class TestElementwise:

    def test_broadcast_add_mul_div(self, rng):
        a = _param(rng, 3, 4)
        b = _param(rng, 4)
        c = Parameter(rng.uniform(1.0, 2.0, size=(3, 1)))
        _assert_grads(lambda: ((a + b) * a / c - b).sum(), [("a", a), ("b", b), ("c", c)])

    def test_reverse_operators(self, rng):
        a = Parameter(rng.uniform(0.5, 1.5, size=(2, 3)))
        _assert_grads(lambda: (1.0 - a + 2.0 / a + 3.0 * a).sum(), [("a", a)])

    def test_exp_log_sqrt(self, rng):
        a = Parameter(rng.uniform(0.5, 2.0, size=(5,)))
        _assert_grads(lambda: (a.exp() + a.log() + a.sqrt()).mean(), [("a", a)])

    def test_reductions_with_axes(self, rng):
        a = _param(rng, 2, 3, 4)
        _assert_grads(lambda: (a.sum(axis=1, keepdims=True) * a).mean(axis=(0, 2)).sum(), [("a", a)])

    def test_reshape_swapaxes_expand(self, rng):
        a = _param(rng, 2, 6)
        b = _param(rng, 1, 3)
        weights = rng.normal(size=(2, 2, 3))
        fn = lambda: (a.reshape(2, 2, 3).swapaxes(0, 1) * b.expand(2, 2, 3) * weights).sum()
        _assert_grads(fn, [("a", a), ("b", b)])

    def test_getitem_repeated_indices_accumulate(self):
        a = Parameter(np.arange(4.0))
        a[np.array([0, 0, 2])].sum().backward()
        np.testing.assert_array_equal(a.grad, [2.0, 0.0, 1.0, 0.0])

    def test_concat(self, rng):
        a, b = _param(rng, 2, 3), _param(rng, 2, 1)
        weights = rng.normal(size=(2, 4))
        _assert_grads(lambda: (concat([a, b], axis=1) * weights).sum(), [("a", a), ("b", b)])

    def test_quick_gelu(self, rng):
        a = _param(rng, 4, 3)
        _assert_grads(lambda: (quick_gelu(a) * a).sum(), [("a", a)])
        np.testing.assert_allclose(quick_gelu(Tensor([0.0])).data, [0.0])


class TestMatmul:

    def test_batched_broadcast_gradient(self, rng):
        a = _param(rng, 2, 3, 4)
        b = _param(rng, 4, 5)
        weights = rng.normal(size=(2, 3, 5))
        _assert_grads(lambda: (matmul(a, b) * weights).sum(), [("a", a), ("b", b)])

    def test_hand_computed_products(self):
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(np.eye(2))).data, np.eye(2))
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_operator_matches_function(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmaxFamily:

    def test_softmax_rows_sum_to_one(self, rng):
        y = softmax(Tensor(rng.normal(size=(3, 5))), axis=-1)
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(3))

    def test_uniform_and_saturated_rows(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, np.full(3, 1.0 / 3.0))
        np.testing.assert_allclose(softmax(Tensor([1000.0, 0.0, 0.0])).data, [1.0, 0.0, 0.0], atol=1e-12)

    def test_masked_entries_are_exactly_zero(self, rng):
        y = softmax(Tensor(rng.normal(size=(4, 4))), mask=causal_mask(4))
        assert np.all(y.data[causal_mask(4)] == 0.0)
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(4))

    def test_softmax_gradient_with_mask(self, rng):
        x = _param(rng, 3, 3)
        weights = rng.normal(size=(3, 3))
        _assert_grads(lambda: (softmax(x, mask=causal_mask(3)) * weights).sum(), [("x", x)])

    def test_log_softmax_gradient(self, rng):
        x = _param(rng, 2, 5)
        weights = rng.normal(size=(2, 5))
        _assert_grads(lambda: (log_softmax(x, axis=0) * weights).sum(), [("x", x)])

    def test_log_softmax_is_stable_for_large_logits(self):
        y = log_softmax(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(y.data))
        assert y.data[0, 0] == pytest.approx(0.0)


class TestLayerNorm:

    def test_normalizes_last_axis(self, rng):
        d = 6
        y = layer_norm(Tensor(rng.normal(3.0, 2.0, size=(4, d))), Tensor(np.ones(d)), Tensor(np.zeros(d)))
        np.testing.assert_allclose(y.data.mean(axis=-1), np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(y.data.var(axis=-1), np.ones(4), atol=1e-4)

    def test_gradient(self, rng):
        x, gamma, beta = _param(rng, 2, 3, 5), _param(rng, 5), _param(rng, 5)
        weights = rng.normal(size=(2, 3, 5))
        _assert_grads(lambda: (layer_norm(x, gamma, beta) * weights).sum(),
                      [("x", x), ("gamma", gamma), ("beta", beta)])

    def test_hand_computed_rows(self):
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        np.testing.assert_array_equal(layer_norm(Tensor([[2.0, 2.0, 2.0]]), gamma, beta).data, np.zeros((1, 3)))
        out = layer_norm(Tensor([[1.0, 2.0, 3.0]]), gamma, beta).data
        np.testing.assert_allclose(out, [[-1.2247, 0.0, 1.2247]], atol=1e-3)

    def test_rejects_single_feature(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


class TestNormalize:

    def test_l2_normalize_gradient(self, rng):
        x = _param(rng, 3, 4)
        weights = rng.normal(size=(3, 4))
        _assert_grads(lambda: (l2_normalize(x) * weights).sum(), [("x", x)])

    def test_zero_norm_raises(self):
        with pytest.raises(NumericError):
            l2_normalize(Tensor(np.zeros((1, 3))))

    def test_check_finite(self):
        check_finite(Tensor([1.0, 2.0]))
        with pytest.raises(NumericError):
            check_finite(np.array([1.0, np.nan]), "values")


class TestAttentionGradients:

    @pytest.mark.parametrize("seed", range(20))
    def test_attention_block_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        length = int(rng.integers(2, 5))
        heads = int(rng.choice([1, 2]))
        attention = MultiHeadAttention(4, heads, rng)
        x = Parameter(rng.normal(size=(2, length, 4)))
        weights = rng.normal(size=(2, length, 4))
        causal = bool(seed % 2)

        def loss():
            out, _ = attention(x, x, x, causal=causal)
            return (out * weights).sum()

        named = [("x", x)] + list(attention.named_parameters())
        _assert_grads(loss, named)


class TestAttention:

    def test_single_key_passes_value_through(self, rng):
        attention = MultiHeadAttention(4, 2, rng)
        q, kv = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))
        out, scores = attention(q, kv, kv)
        np.testing.assert_allclose(scores.data, np.ones((2, 1, 1)))
        np.testing.assert_allclose(out.data, attention.out_proj(attention.v_proj(kv)).data, atol=1e-12)

    def test_causal_scores_vanish_above_diagonal(self, rng):
        attention = MultiHeadAttention(4, 1, rng)
        x = Tensor(rng.normal(size=(3, 4)))
        _, scores = attention(x, x, x, causal=True)
        assert np.all(scores.data[0][np.triu_indices(3, k=1)] == 0.0)

    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ConfigError):
            MultiHeadAttention(6, 4, rng)


class TestBackward:

    def test_gradients_accumulate_until_zeroed(self, rng):
        a = _param(rng, 3)
        (a * 2.0).sum().backward()
        (a * 2.0).sum().backward()
        np.testing.assert_array_equal(a.grad, np.full(3, 4.0))
        a.zero_grad()
        assert a.grad is None

    def test_shared_subexpression(self, rng):
        a = _param(rng, 3)
        b = a * a
        (b + b).sum().backward()
        np.testing.assert_allclose(a.grad, 4.0 * a.data)

    def test_non_scalar_loss_rejected(self, rng):
        with pytest.raises(UsageError):
            (_param(rng, 3) * 2.0).backward()

    def test_loss_without_parameters_rejected(self):
        with pytest.raises(UsageError):
            Tensor([1.0]).sum().backward()

    def test_no_grad_records_nothing(self, rng):
        a = _param(rng, 3)
        with no_grad():
            out = (a * 2.0).sum()
        assert not out.requires_grad

    def test_deep_chain_does_not_recurse(self):
        a = Parameter(np.array([1.0]))
        out = a
        for _ in range(5000):
            out = out + 0.0
        out.sum().backward()
        np.testing.assert_array_equal(a.grad, [1.0])


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-9)) < 1e-2


def test_numerical_gradient_of_quadratic():
    a = Tensor(np.array([1.0, -2.0]))
    grad = numerical_gradient(lambda: (a * a).sum(), a)
    np.testing.assert_allclose(grad, [2.0, -4.0], atol=1e-8)
