"""Tensor ops: spec'd values, probability properties, tape mechanics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiexit import tensor as T


def t64(data, grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestSoftmax:
    def test_symmetry_two(self):
        p = T.softmax(t64([[0.0, 0.0]]))
        np.testing.assert_allclose(p.data, [[0.5, 0.5]])

    def test_symmetry_four(self):
        p = T.softmax(t64([[5.0, 5.0, 5.0, 5.0]]))
        np.testing.assert_allclose(p.data, [[0.25] * 4])

    def test_closed_form(self):
        # scalar oracle: e / (1 + e) with e = exp(1)
        e = math.exp(1.0)
        p = T.softmax(t64([[1.0, 2.0]]))
        np.testing.assert_allclose(p.data, [[1 / (1 + e), e / (1 + e)]], atol=1e-5)
        np.testing.assert_allclose(p.data, [[0.26894, 0.73106]], atol=1e-5)

    def test_rows_sum_to_one_large_logits(self, rng):
        z = rng.uniform(-50, 50, size=(64, 10)).astype(np.float32)
        p = T.softmax(T.Tensor(z))
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-6)
        assert (p.data >= 0).all()

    def test_overflow_safe(self):
        p = T.softmax(t64([[1000.0, 999.0]]))
        assert np.isfinite(p.data).all()

    def test_nonfinite_rejected(self):
        with pytest.raises(T.InvalidValueError):
            T.softmax(t64([[np.inf, 0.0]]))
        with pytest.raises(T.InvalidValueError):
            T.softmax(t64([[np.nan, 0.0]]))


class TestTemperedSoftmax:
    def test_tau_one_is_softmax_bitwise(self, rng):
        z = T.Tensor(rng.normal(size=(4, 7)).astype(np.float32))
        np.testing.assert_array_equal(T.tempered_softmax(z, 1.0).data, T.softmax(z).data)

    def test_high_tau_flattens(self):
        p = T.tempered_softmax(t64([[3.0, -1.0]]), 1e6)
        np.testing.assert_allclose(p.data, [[0.5, 0.5]], atol=1e-4)

    def test_matches_scaled_softmax(self):
        # ([2, 0], tau=2) == softmax([1, 0])
        p = T.tempered_softmax(t64([[2.0, 0.0]]), 2.0)
        np.testing.assert_allclose(p.data, [[0.73106, 0.26894]], atol=1e-5)

    def test_nonpositive_tau_rejected(self):
        for tau in (0.0, -1.0):
            with pytest.raises(ValueError):
                T.tempered_softmax(t64([[1.0, 2.0]]), tau)


class TestCrossEntropy:
    def test_uniform_logits(self):
        z = t64(np.zeros((3, 4)))
        assert T.cross_entropy(z, np.array([0, 1, 3])).item() == pytest.approx(math.log(4), abs=1e-9)

    def test_confident_margin(self):
        z = t64([[50.0, 0.0, 0.0]])
        assert T.cross_entropy(z, np.array([0])).item() < 1e-6

    def test_scalar_oracle(self):
        # -ln(softmax([1,2])[0]) = -ln(0.26894...)
        z = t64([[1.0, 2.0]])
        want = -math.log(1.0 / (1.0 + math.exp(1.0)))
        assert T.cross_entropy(z, np.array([0])).item() == pytest.approx(want, abs=1e-5)
        assert T.cross_entropy(z, np.array([0])).item() == pytest.approx(1.31326, abs=1e-5)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(t64([[0.0, 0.0]]), np.array([2]))
        with pytest.raises(IndexError):
            T.cross_entropy(t64([[0.0, 0.0]]), np.array([-1]))

    def test_batch_mean(self, rng):
        z = rng.normal(size=(6, 5))
        labels = rng.integers(0, 5, size=6)
        per = [T.cross_entropy(t64(z[i : i + 1]), labels[i : i + 1]).item() for i in range(6)]
        got = T.cross_entropy(t64(z), labels).item()
        assert got == pytest.approx(np.mean(per), abs=1e-12)


class TestKL:
    def test_identity_zero(self):
        p = t64([[0.3, 0.7], [0.5, 0.5]])
        q = t64([[0.3, 0.7], [0.5, 0.5]])
        assert T.kl_divergence(p, q).item() == 0.0

    def test_hard_vs_uniform(self):
        val = T.kl_divergence(t64([[1.0, 0.0]]), t64([[0.5, 0.5]])).item()
        assert val == pytest.approx(math.log(2), abs=1e-9)

    def test_scalar_oracle(self):
        want = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        got = T.kl_divergence(t64([[0.5, 0.5]]), t64([[0.25, 0.75]])).item()
        assert got == pytest.approx(want, abs=1e-9)
        assert got == pytest.approx(0.14384, abs=1e-5)

    def test_zero_in_q_clamped_and_counted(self):
        T.reset_kl_clamp_count()
        val = T.kl_divergence(t64([[1.0, 0.0]]), t64([[0.0, 1.0]])).item()
        assert np.isfinite(val)
        assert T.kl_clamp_count() == 1

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6),
           st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6))
    def test_nonnegative(self, a, b):
        m = min(len(a), len(b))
        p = np.asarray(a[:m]) / np.sum(a[:m])
        q = np.asarray(b[:m]) / np.sum(b[:m])
        assert T.kl_divergence(t64(p[None]), t64(q[None])).item() >= 0.0

    def test_zero_iff_close(self, rng):
        p = rng.dirichlet(np.ones(5), size=4)
        q = p.copy()
        q[:, 0] += 1e-8
        q[:, 1] -= 1e-8
        assert T.kl_divergence(t64(p), t64(q)).item() > 0.0
        assert T.kl_divergence(t64(p), t64(p.copy())).item() == 0.0

    def test_invalid_distribution_rejected(self):
        with pytest.raises(T.InvalidValueError):
            T.kl_divergence(t64([[0.9, 0.3]]), t64([[0.5, 0.5]]))
        with pytest.raises(T.InvalidValueError):
            T.kl_divergence(t64([[-0.1, 1.1]]), t64([[0.5, 0.5]]))


class TestL2:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 4))
        assert T.l2_distance_sq(t64(a), t64(a.copy())).item() == 0.0

    def test_hand_sum(self):
        assert T.l2_distance_sq(t64([[1.0, 2.0]]), t64([[0.0, 0.0]])).item() == 5.0

    def test_loop_oracle(self, rng):
        a = rng.normal(size=(2, 8))
        b = rng.normal(size=(2, 8))
        want = sum((float(a[i, j]) - float(b[i, j])) ** 2 for i in range(2) for j in range(8)) / 2
        assert T.l2_distance_sq(t64(a), t64(b)).item() == pytest.approx(want, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.l2_distance_sq(t64([[1.0]]), t64([[1.0, 2.0]]))


class TestLayerForward:
    def test_relu(self):
        y = T.layer_forward("relu", {}, t64([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(y.data, [[0.0, 0.0, 2.0]])

    def test_global_avg_pool(self, rng):
        x = rng.normal(size=(1, 3, 4, 5))
        y = T.layer_forward("global_avg_pool", {}, t64(x))
        assert y.shape == (1, 3)
        np.testing.assert_allclose(y.data, x.mean(axis=(2, 3)), rtol=1e-12)

    def test_identity_conv(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = T.layer_forward("conv2d", {"weight": t64(w), "stride": 1, "padding": 0}, t64(x))
        np.testing.assert_array_equal(y.data, x)

    def test_max_pool(self):
        x = t64(np.arange(16.0).reshape(1, 1, 4, 4))
        y = T.layer_forward("max_pool", {"kernel": 2}, x)
        np.testing.assert_array_equal(y.data.ravel(), [5, 7, 13, 15])

    def test_avg_pool(self):
        x = t64(np.arange(16.0).reshape(1, 1, 4, 4))
        y = T.layer_forward("avg_pool", {"kernel": 2}, x)
        np.testing.assert_allclose(y.data.ravel(), [2.5, 4.5, 10.5, 12.5])

    def test_residual_add(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        y = T.layer_forward("residual_add", {"other": t64(b)}, t64(a))
        np.testing.assert_allclose(y.data, a + b, rtol=1e-12)

    def test_linear_shape_error(self, rng):
        with pytest.raises(T.ShapeError):
            T.layer_forward("linear", {"weight": t64(rng.normal(size=(4, 3)))},
                            t64(rng.normal(size=(2, 5))))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.layer_forward("dropout", {}, t64([[1.0]]))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = t64(rng.normal(size=(3, 4)), grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(x)
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_l2_analytic(self, rng):
        xv = rng.normal(size=(1, 5))
        x = t64(xv, grad=True)
        with T.Tape() as tape:
            loss = T.l2_distance_sq(x, t64(np.zeros((1, 5))))
        T.backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * xv, rtol=1e-12)

    def test_accumulates_across_uses(self, rng):
        x = t64(rng.normal(size=(2, 2)), grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.add(x, x))
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, 2 * np.ones((2, 2)))

    def test_nonscalar_root_rejected(self, rng):
        x = t64(rng.normal(size=(2, 2)), grad=True)
        with T.Tape() as tape:
            y = T.relu(x)
        with pytest.raises(T.ContractError):
            T.backward(tape, y)

    def test_no_tape_records_nothing(self, rng):
        x = t64(rng.normal(size=(2, 2)), grad=True)
        y = T.relu(x)
        assert y.requires_grad is False

    def test_eval_mode_inside_tape_not_recorded_for_detached(self, rng):
        x = t64(rng.normal(size=(2, 2)), grad=True)
        with T.Tape() as tape:
            T.relu(x.detach())
        assert len(tape) == 0

    def test_deterministic_bitwise(self, rng):
        xv = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
        wv = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        grads = []
        for _ in range(2):
            x = T.Tensor(xv.copy(), requires_grad=True)
            w = T.Tensor(wv.copy(), requires_grad=True)
            with T.Tape() as tape:
                y = T.conv2d(x, w, stride=1, padding=1)
                loss = T.sum_all(T.relu(y))
            T.backward(tape, loss)
            grads.append((x.grad.copy(), w.grad.copy()))
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        np.testing.assert_array_equal(grads[0][1], grads[1][1])

    def test_grad_shape_matches(self, rng):
        x = t64(rng.normal(size=(2, 3, 4, 4)), grad=True)
        w = t64(rng.normal(size=(5, 3, 3, 3)), grad=True)
        with T.Tape() as tape:
            loss = T.sum_all(T.conv2d(x, w, 2, 1))
        T.backward(tape, loss)
        assert x.grad.shape == x.shape and w.grad.shape == w.shape


class TestTensorBasics:
    def test_shape_data_invariant(self, rng):
        t = T.Tensor(rng.normal(size=(2, 3, 4)).astype(np.float32))
        assert int(np.prod(t.shape)) == t.size

    def test_default_dtype_float32(self):
        assert T.Tensor([1, 2, 3]).dtype == np.float32

    def test_detach_shares_data(self, rng):
        t = T.Tensor(rng.normal(size=(3,)), requires_grad=True)
        d = t.detach()
        assert d.data is t.data and not d.requires_grad
