"""Engine oracles: closed-form values, invariants, and the
finite-difference sweep over every differentiable op."""

import math

import numpy as np
import pytest
from conftest import op_cases, tiny_encoder_fn

from cubevit import tensor as T
from cubevit.errors import DegenerateInputError, UsageError


class TestSoftmax:
    def test_symmetric_pair(self):
        out = T.softmax(T.Tensor([0.0, 0.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)

    def test_closed_form_ln2(self):
        out = T.softmax(T.Tensor([math.log(2.0), 0.0])).data
        np.testing.assert_allclose(out, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.normal(0, 3, size=(4, 7))
            c = rng.normal(0, 50)
            base = T.softmax(T.Tensor(x), axis=1).data
            shifted = T.softmax(T.Tensor(x + c), axis=1).data
            np.testing.assert_allclose(base, shifted, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = rng.normal(0, 10, size=(5, 9))
            rows = T.softmax(T.Tensor(x), axis=1).data.sum(axis=1)
            np.testing.assert_allclose(rows, 1.0, atol=1e-12)

    def test_invalid_axis(self):
        with pytest.raises(UsageError):
            T.softmax(T.Tensor([1.0, 2.0]), axis=3)


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(T.gelu(T.Tensor([10.0])).data[0] - 10.0) < 1e-6

    def test_phi_of_one(self):
        # Oracle: Phi(1) from the error function.
        expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        got = T.gelu(T.Tensor([1.0])).data[0]
        assert abs(got - expected) < 1e-12
        assert abs(got - 0.841345) < 1e-6


class TestLayerNorm:
    def _ln(self, x, gain=None, bias=None, eps=1e-6):
        x = np.asarray(x, dtype=np.float64)
        width = x.shape[-1]
        gain = np.ones(width) if gain is None else np.asarray(gain, dtype=np.float64)
        bias = np.zeros(width) if bias is None else np.asarray(bias, dtype=np.float64)
        return T.layer_norm(T.Tensor(x), T.Tensor(gain), T.Tensor(bias), eps).data

    def test_constant_row_collapses(self):
        np.testing.assert_allclose(self._ln([1.0, 1.0]), [0.0, 0.0], atol=1e-3)

    def test_unit_variance_pair(self):
        np.testing.assert_allclose(self._ln([-1.0, 1.0]), [-1.0, 1.0], atol=1e-5)

    def test_zero_gain_broadcasts_bias(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4))
        bias = rng.normal(size=4)
        out = self._ln(x, gain=np.zeros(4), bias=bias)
        np.testing.assert_allclose(out, np.broadcast_to(bias, out.shape), atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.normal(size=(2, 6))
            c = rng.normal(0, 10)
            np.testing.assert_allclose(self._ln(x), self._ln(x + c), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            T.layer_norm(T.Tensor([[1.0, 2.0]]), T.Tensor([1.0]), T.Tensor([0.0, 0.0]))

    def test_eps_positive(self):
        with pytest.raises(UsageError):
            T.layer_norm(
                T.Tensor([[1.0, 2.0]]), T.Tensor([1.0, 1.0]), T.Tensor([0.0, 0.0]), eps=0.0
            )


class TestCosineSimilarity:
    def test_identical(self):
        v = np.array([1.0, -2.0, 0.5])
        assert abs(T.cosine_similarity(T.Tensor(v), T.Tensor(v)).data - 1.0) < 1e-12

    def test_orthogonal(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 2.0])
        assert abs(T.cosine_similarity(T.Tensor(a), T.Tensor(b)).data) < 1e-15

    def test_inv_sqrt2(self):
        got = T.cosine_similarity(T.Tensor([1.0, 0.0]), T.Tensor([1.0, 1.0])).data
        assert abs(got - 1.0 / math.sqrt(2.0)) < 1e-12
        assert abs(got - 0.70711) < 1e-5

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            T.cosine_similarity(T.Tensor([0.0, 0.0]), T.Tensor([1.0, 1.0]))

    def test_bounds_and_scale_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a = rng.normal(size=5)
            b = rng.normal(size=5)
            c = float(T.cosine_similarity(T.Tensor(a), T.Tensor(b)).data)
            assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12
            scaled = float(
                T.cosine_similarity(T.Tensor(3.7 * a), T.Tensor(0.2 * b)).data
            )
            assert abs(c - scaled) < 1e-12


class TestGradients:
    def test_square_at_three(self):
        x = T.Tensor(3.0, requires_grad=True)
        y = T.mul(x, x)
        (grad,) = T.gradient_of(y, [x])
        assert abs(grad - 6.0) < 1e-12

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            T.mul(x, x).backward()

    def test_softmax_cross_entropy_grad_is_probs_minus_onehot(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=7)
        true = 3
        x = T.Tensor(logits, requires_grad=True)
        loss = T.neg(T.take_rows(T.log_softmax(x), np.array([true])))
        (grad,) = T.gradient_of(T.tensor_sum(loss), [x])
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        onehot = np.eye(7)[true]
        np.testing.assert_allclose(grad, probs - onehot, atol=1e-12)

    def test_every_op_matches_central_differences(self):
        for name, f, arrays in op_cases():
            worst = T.check_gradients(f, arrays, probes=200, seed=hash(name) % 2**32)
            assert worst <= 1e-4, f"{name}: worst relative error {worst}"

    def test_composite_encoder_matches_central_differences(self):
        forward, arrays = tiny_encoder_fn(seed=0)
        worst = T.check_gradients(forward, arrays, probes=200, seed=99)
        assert worst <= 1e-4


class TestDeterminismAndInvariants:
    def test_forward_bit_identical(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 8))
        a = T.softmax(T.Tensor(x), axis=1).data
        b = T.softmax(T.Tensor(x), axis=1).data
        assert np.array_equal(a, b)

    def test_all_ops_finite_on_random_inputs(self):
        for name, f, arrays in op_cases(seed=42):
            out = f([T.Tensor(a) for a in arrays])
            assert np.isfinite(out.data).all(), name

    def test_tensor_shape_invariant(self):
        t = T.Tensor(np.zeros((3, 4)))
        assert t.data.size == 12 and t.shape == (3, 4)

    def test_backward_accumulates_over_reuse(self):
        x = T.Tensor(2.0, requires_grad=True)
        y = T.add(T.mul(x, x), T.mul(x, T.Tensor(3.0)))
        (grad,) = T.gradient_of(y, [x])
        assert abs(grad - 7.0) < 1e-12
