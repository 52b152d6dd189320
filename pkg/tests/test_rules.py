import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bionas import rules
from bionas.rules import (FeedbackRule, FeedbackState, HebbianConvState, PredictiveCodingConvState, backward_conv,
                          backward_dense, compute_feedback_matrix, dfa_backward, hebbian_forward_update,
                          predictive_coding_backward, predictive_coding_forward)
from bionas.tensor import ActivationRecord, RngStream, conv2d, relu_forward
from conftest import central_diff, rel_err
from fixtures import fa_alignment_trace, sign_concordance_run

weights = arrays(np.float64, (4, 5), elements=st.sampled_from([0.0, -1.5, -0.3, 0.2, 2.0]))


def state(rule, W, seed=0, **kw):
    return FeedbackState.create(rule, W, RngStream(seed, (1, 0)), **kw)


class TestFeedbackMatrix:
    def test_usf_example(self):
        W = np.array([[0.5, -2.0], [0.0, 3.0]])
        assert np.array_equal(compute_feedback_matrix("usf", W, state("usf", W)), [[1, -1], [0, 1]])

    def test_frsf_fixed(self):
        W = np.random.default_rng(0).normal(size=(3, 4))
        s = state("frsf", W)
        assert np.array_equal(compute_feedback_matrix("frsf", W, s), compute_feedback_matrix("frsf", W, s))

    def test_fa_constant(self):
        W = np.random.default_rng(1).normal(size=(3, 4))
        s = state("fa", W)
        B = compute_feedback_matrix("fa", W, s).copy()
        W += 1.0
        assert np.array_equal(compute_feedback_matrix("fa", W, s), B)

    @given(weights, st.integers(0, 1000))
    def test_brsf_redraw_keeps_signs(self, W, seed):
        s = state("brsf", W, seed)
        a = compute_feedback_matrix("brsf", W, s)
        b = compute_feedback_matrix("brsf", W, s)
        assert np.array_equal(np.sign(a), np.sign(W)) and np.array_equal(np.sign(b), np.sign(W))
        nz = W != 0
        if nz.any():
            assert not np.array_equal(np.abs(a[nz]), np.abs(b[nz]))

    @given(weights, st.sampled_from(["usf", "brsf", "frsf"]))
    def test_sign_concordance(self, W, rule):
        s = state(rule, W)
        assert np.array_equal(np.sign(compute_feedback_matrix(rule, W, s)), np.sign(W))

    @pytest.mark.parametrize("rule", ["bp", "hebb", "pc", "dfa"])
    def test_rejects_non_matrix_rules(self, rule):
        W = np.ones((2, 3))
        s = FeedbackState(FeedbackRule.parse(rule), W, RngStream(0))
        with pytest.raises(ValueError):
            compute_feedback_matrix(rule, W, s)

    def test_shape_mismatch(self):
        W = np.ones((2, 3))
        with pytest.raises(ValueError):
            compute_feedback_matrix("usf", np.ones((3, 2)), state("usf", W))

    def test_rule_tokens(self):
        assert [r.value for r in FeedbackRule if r is not FeedbackRule.NONE] == \
            ["bp", "fa", "dfa", "usf", "brsf", "frsf", "hebb", "pc"]
        assert FeedbackRule.HEBB.forward_time and FeedbackRule.PC.forward_time
        assert not FeedbackRule.FA.forward_time


class TestBackwardDense:
    def setup_method(self):
        rng = np.random.default_rng(2)
        self.z_prev = rng.normal(size=(5, 4))
        self.z_prev[np.abs(self.z_prev) < 1e-3] = 0.1
        self.x, self.deriv = relu_forward(self.z_prev)
        self.W = rng.normal(size=(3, 4))
        self.r = rng.normal(size=(5, 3))

    def test_bp_matches_finite_differences(self):
        lr = 0.1
        rec = ActivationRecord(self.x, self.z_prev, self.deriv)
        dW, e_prev = backward_dense("bp", self.r, rec, state("bp", self.W), lr)
        f = lambda: float((relu_forward(self.z_prev)[0] @ self.W.T * self.r).sum())
        assert rel_err(dW, -lr * central_diff(f, self.W)) < 1e-4
        assert rel_err(e_prev, central_diff(f, self.z_prev)) < 1e-4

    @pytest.mark.parametrize("rule", ["bp", "fa", "usf", "brsf", "frsf"])
    def test_zero_error(self, rule):
        rec = ActivationRecord(self.x, self.z_prev, self.deriv)
        dW, e_prev = backward_dense(rule, np.zeros((5, 3)), rec, state(rule, self.W), 0.1)
        assert not dW.any() and not e_prev.any()

    @given(st.integers(0, 2**31 - 1))
    def test_usf_positive_weights_match_bp_signs(self, seed):
        # with one output unit, e @ W and e @ sign(W) differ by a positive factor per column
        rng = np.random.default_rng(seed)
        W = np.abs(rng.normal(size=(1, 6))) + 1e-3
        rec = ActivationRecord(rng.normal(size=(4, 6)))
        e = rng.normal(size=(4, 1))
        _, e_bp = backward_dense("bp", e, rec, state("bp", W), 1.0)
        _, e_usf = backward_dense("usf", e, rec, state("usf", W), 1.0)
        assert np.array_equal(np.sign(e_bp), np.sign(e_usf))

    def test_weight_delta_is_rule_independent(self):
        rec = ActivationRecord(self.x, self.z_prev, self.deriv)
        ref, _ = backward_dense("bp", self.r, rec, state("bp", self.W), 0.1)
        for rule in ("fa", "usf", "brsf", "frsf"):
            assert np.array_equal(backward_dense(rule, self.r, rec, state(rule, self.W), 0.1)[0], ref)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            backward_dense("bp", np.ones((5, 2)), ActivationRecord(self.x), state("bp", self.W), 0.1)

    def test_non_finite_error(self):
        with pytest.raises(rules.NumericalError):
            backward_dense("bp", np.full((5, 3), np.nan), ActivationRecord(self.x), state("bp", self.W), 0.1)


class TestBackwardConv:
    def test_bp_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x, W = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        r = rng.normal(size=(2, 3, 3, 3))
        dW, e_prev = backward_conv("bp", r, ActivationRecord(x), state("bp", W), 0.5, stride=2, padding=1)
        f = lambda: float((conv2d(x, W, 2, 1) * r).sum())
        assert rel_err(dW, -0.5 * central_diff(f, W)) < 1e-4
        assert rel_err(e_prev, central_diff(f, x)) < 1e-4

    @pytest.mark.parametrize("rule", ["bp", "fa", "usf", "brsf", "frsf"])
    def test_zero_error(self, rule):
        W = np.random.default_rng(4).normal(size=(3, 2, 3, 3))
        dW, e = backward_conv(rule, np.zeros((1, 3, 4, 4)), ActivationRecord(np.ones((1, 2, 4, 4))),
                              state(rule, W), 0.1, padding=1)
        assert not dW.any() and not e.any()

    def test_usf_uses_sign_kernel(self):
        rng = np.random.default_rng(5)
        W = rng.normal(size=(3, 2, 3, 3))
        x, r = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 4, 4))
        s = state("usf", W)
        _, e_usf = backward_conv("usf", r, ActivationRecord(x), s, 0.1, padding=1)
        _, e_ref = backward_conv("bp", r, ActivationRecord(x), state("bp", s.usf_scale * np.sign(W)), 0.1, padding=1)
        assert rel_err(e_usf, e_ref) < 1e-12


class TestDFA:
    def setup_method(self):
        self.W = np.random.default_rng(6).normal(size=(4, 3))
        self.s = state("dfa", self.W, output_dim=2)

    def test_zero_output_error(self):
        rec = ActivationRecord(None, None, np.ones((5, 4)))
        assert not dfa_backward(np.zeros((5, 2)), rec, self.s).any()

    def test_fixed_feedback(self):
        rec = ActivationRecord(None, None, np.ones((5, 4)))
        e = np.random.default_rng(7).normal(size=(5, 2))
        assert np.array_equal(dfa_backward(e, rec, self.s), dfa_backward(e, rec, self.s))

    def test_single_layer_reduces_to_fa(self):
        # with the output layer directly above, DFA's B plays FA's role for that layer
        e = np.random.default_rng(8).normal(size=(5, 2))
        deriv = np.random.default_rng(9).integers(0, 2, size=(5, 4)).astype(float)
        fa_state = state("fa", np.zeros((2, 4)))
        fa_state.B = self.s.B
        _, e_fa = backward_dense("fa", e, ActivationRecord(np.ones((5, 4)), None, deriv), fa_state, 1.0)
        assert np.array_equal(dfa_backward(e, ActivationRecord(None, None, deriv), self.s), e_fa)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dfa_backward(np.zeros((5, 3)), ActivationRecord(None), self.s)


class TestHebbian:
    def test_zero_scale(self):
        W = np.random.default_rng(10).normal(size=(2, 3, 3, 3))
        s = HebbianConvState(W.copy(), hebbian_scale=0.0, padding=1)
        hebbian_forward_update(s, np.ones((1, 3, 4, 4)))
        assert np.array_equal(s.conv_weights, W)

    def test_eval_mode(self):
        W = np.random.default_rng(11).normal(size=(2, 3, 3, 3))
        s = HebbianConvState(W.copy(), padding=1)
        hebbian_forward_update(s, np.ones((1, 3, 4, 4)), training=False)
        assert np.array_equal(s.conv_weights, W)

    def test_single_patch_outer_product(self):
        rng = np.random.default_rng(12)
        W = rng.normal(size=(2, 3, 1, 1))
        x = rng.normal(size=(1, 3, 1, 1))
        s = HebbianConvState(W.copy(), hebbian_scale=1e-4)
        y = hebbian_forward_update(s, x)
        yh, xh = y.ravel() / np.linalg.norm(y), x.ravel() / np.linalg.norm(x)
        expected = 1e-4 * np.outer(yh, xh).reshape(W.shape)
        assert rel_err(s.hebbian_accumulator, expected) < 1e-12
        assert np.allclose(s.conv_weights, W + expected, rtol=0, atol=1e-15)

    def test_norm_cap(self):
        W = np.full((2, 1, 3, 3), 3.0)
        s = HebbianConvState(W, hebbian_scale=1e-2, normalize=True, norm_cap=1.0, padding=1)
        hebbian_forward_update(s, np.ones((1, 1, 4, 4)))
        assert np.all(np.linalg.norm(s.conv_weights.reshape(2, -1), axis=1) <= 1.0 + 1e-12)


class TestPredictiveCoding:
    def test_zero_error_weights(self):
        rng = np.random.default_rng(13)
        W, x = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(1, 2, 5, 5))
        s = PredictiveCodingConvState(W, np.zeros(2), prediction_steps=3, padding=1)
        assert np.array_equal(predictive_coding_forward(s, x), conv2d(x, W, 1, 1))

    def test_unit_weight_recovers_input(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 1, 5, 5))
        s = PredictiveCodingConvState(rng.normal(size=(1, 1, 3, 3)), np.ones(1), prediction_steps=1, padding=1)
        assert np.allclose(predictive_coding_forward(s, x), x, rtol=0, atol=1e-15)

    def test_geometric_residual(self):
        x = np.random.default_rng(15).normal(size=(1, 2, 4, 4))
        s = PredictiveCodingConvState(np.zeros((2, 2, 1, 1)), np.full(2, 0.5), prediction_steps=3)
        pred, cache = predictive_coding_forward(s, x, return_cache=True)
        norms = [np.linalg.norm(e) for e in cache.errors] + [np.linalg.norm(x - pred)]
        assert np.allclose(np.array(norms[1:]) / norms[:-1], 0.5, rtol=1e-12)

    @pytest.mark.parametrize("gating", [False, True])
    def test_backward_matches_finite_differences(self, gating):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(1, 2, 4, 4))
        s = PredictiveCodingConvState(rng.normal(size=(3, 2, 3, 3)) * 0.3, rng.uniform(0.2, 0.8, 3),
                                      prediction_steps=2, gating=gating,
                                      gate_weights=rng.normal(size=(3, 3, 1, 1)) if gating else None, padding=1)
        r = rng.normal(size=(1, 3, 4, 4))
        _, cache = predictive_coding_forward(s, x, return_cache=True)
        dx, dW, dew, dgate = predictive_coding_backward(s, cache, r)
        f = lambda: float((predictive_coding_forward(s, x) * r).sum())
        assert rel_err(dx, central_diff(f, x)) < 1e-4
        assert rel_err(dW, central_diff(f, s.conv_weights)) < 1e-4
        assert rel_err(dew, central_diff(f, s.error_weights)) < 1e-4
        if gating:
            assert rel_err(dgate, central_diff(f, s.gate_weights)) < 1e-4

    def test_steps_validated(self):
        with pytest.raises(ValueError):
            PredictiveCodingConvState(np.zeros((1, 1, 1, 1)), np.ones(1), prediction_steps=0)


@pytest.mark.parametrize("rule", ["usf", "brsf", "frsf"])
def test_sign_concordance_over_training(rule):
    violations, checks = sign_concordance_run(rule)
    assert checks == 150 and violations == 0


def test_fa_alignment_fixture():
    angles = fa_alignment_trace()
    # frozen from the oracle run: starts near orthogonal, aligns to about 70 degrees
    assert angles[0] == pytest.approx(93.2774, abs=1e-3)
    assert angles[-1] == pytest.approx(70.3855, abs=1e-3)
    assert angles[-1] < 90.0
