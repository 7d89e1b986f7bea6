"""Dynamic gate tests: logits law, weight law, modes, budget filtering."""

import numpy as np
import pytest

from gatetrack import attention as A
from gatetrack import flops
from gatetrack import gate as G
from gatetrack import tensor as T
from gatetrack.errors import ConfigError, ParameterError, ShapeError


def make_setup(rng, channels=8, reduction=2, scale=2, tau=1.0):
    params = T.ParamSet()
    branches = {
        "se": A.init_se(params, rng, channels, reduction),
        "ca": A.init_ca(params, rng, channels, reduction),
        "cbam": A.init_cbam(params, rng, channels, reduction),
    }
    gate = G.init_gate(params, rng, channels, scale, tau)
    return params, branches, gate


def zero_setup(channels=8, reduction=2, scale=2, tau=1.0):
    branches = {
        "se": A.zero_se(channels, reduction),
        "ca": A.zero_ca(channels, reduction),
        "cbam": A.zero_cbam(channels, reduction),
    }
    return branches, G.zero_gate(channels, scale, tau)


class TestGateLogits:
    def test_zero_params_zero_logits(self):
        _, gate = zero_setup()
        f = T.Tensor4(np.random.default_rng(0).standard_normal((1, 8, 4, 4)))
        assert np.array_equal(G.gate_logits(f, gate).data.ravel(), np.zeros(4))

    def test_bias_passthrough_on_zero_feature(self):
        _, gate = zero_setup()
        gate.b2.data[:] = np.array([1.0, 0.0, 0.0, 0.0]).reshape(1, 4, 1, 1)
        s = G.gate_logits(T.zeros((1, 8, 4, 4)), gate)
        assert np.array_equal(s.data.ravel(), [1.0, 0.0, 0.0, 0.0])

    def test_matches_straight_line_reimplementation(self):
        rng = np.random.default_rng(1)
        params, branches, gate = make_setup(rng)
        gate.w2.data[:] = rng.standard_normal(gate.w2.shape)
        gate.b2.data[:] = rng.standard_normal(gate.b2.shape)
        f = T.Tensor4(rng.standard_normal((1, 8, 5, 6)))
        got = G.gate_logits(f, gate).data.ravel()
        # independent re-evaluation with plain numpy
        pooled = f.data.mean(axis=(2, 3)).ravel()
        hidden = np.maximum(gate.w1.data[:, :, 0, 0] @ pooled + gate.b1.data.ravel(), 0.0)
        expect = gate.w2.data[:, :, 0, 0] @ hidden + gate.b2.data.ravel()
        assert np.max(np.abs(got - expect)) < 1e-12

    def test_channel_mismatch(self):
        _, gate = zero_setup()
        with pytest.raises(ShapeError):
            G.gate_logits(T.zeros((1, 4, 2, 2)), gate)


class TestGateWeights:
    def test_uniform(self):
        w = G.gate_weights(T.vector([0.0, 0.0, 0.0, 0.0]), tau=1.0)
        assert np.allclose(w.data.ravel(), 0.25, atol=1e-15)

    def test_hand_two_logits(self):
        w = G.gate_weights(T.vector([1.0, 2.0]), tau=0.5).data.ravel()
        e2, e4 = np.exp(2.0), np.exp(4.0)
        assert np.allclose(w, [e2 / (e2 + e4), e4 / (e2 + e4)], atol=1e-12)
        assert w == pytest.approx([0.1192, 0.8808], abs=5e-5)

    def test_high_temperature_uniform(self):
        w = G.gate_weights(T.vector([3.0, -1.0, 0.5, 2.0]), tau=1e6).data.ravel()
        assert np.max(np.abs(w - 0.25)) < 1e-6

    def test_invalid_tau(self):
        with pytest.raises(ParameterError):
            G.gate_weights(T.vector([1.0]), tau=-1.0)

    def test_sum_positive_argmax(self):
        rng = np.random.default_rng(2)
        for tau in [1e-3, 0.3, 1.0, 30.0]:
            s = rng.standard_normal(4)
            s[rng.integers(4)] += 2.5
            w = G.gate_weights(T.vector(s), tau=tau).data.ravel()
            assert abs(w.sum() - 1.0) <= 1e-12
            assert np.all(w > 0)
            assert np.argmax(w) == np.argmax(s)


class TestBudgetFilter:
    TABLE = flops.BranchCostTable(np.array([0.0, 1.0, 2.0, 4.0]), 8, 4, 4)

    def test_large_budget_no_change(self):
        k = np.array([0.1, 0.2, 0.3, 0.4])
        out = G.budget_filter(k, self.TABLE, remaining_budget=100.0)
        assert np.allclose(out, k, atol=1e-15)

    def test_zero_budget_identity(self):
        out = G.budget_filter(np.array([0.1, 0.2, 0.3, 0.4]), self.TABLE, 0.0)
        assert np.array_equal(out, [1.0, 0.0, 0.0, 0.0])

    def test_hand_renormalization(self):
        out = G.budget_filter(np.array([0.1, 0.2, 0.3, 0.4]), self.TABLE, 2.0)
        assert np.allclose(out, np.array([0.1, 0.2, 0.3, 0.0]) / 0.6, atol=1e-12)

    def test_identity_fallback_when_all_masked(self):
        # all weight on the costliest branch, budget excludes it
        out = G.budget_filter(np.array([0.0, 0.0, 0.0, 1.0]), self.TABLE, 1.5)
        assert np.array_equal(out, [1.0, 0.0, 0.0, 0.0])

    def test_selected_cost_never_exceeds_budget(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            k = rng.dirichlet(np.ones(4))
            budget = float(rng.uniform(0, 5))
            out = G.budget_filter(k, self.TABLE, budget)
            assert abs(out.sum() - 1.0) <= 1e-12
            chosen = int(np.argmax(out))
            assert self.TABLE[chosen] <= budget
            assert float(out @ self.TABLE.costs) <= budget + 1e-12

    def test_negative_budget_rejected(self):
        with pytest.raises(ParameterError):
            G.budget_filter(np.ones(4) / 4, self.TABLE, -1.0)


class TestApplyGatedAttention:
    def test_soft_uniform_zero_params_is_half(self):
        # identity + 0.5x + 0.25x + 0.25x, each weighted 0.25 -> 0.5x
        branches, gate = zero_setup()
        rng = np.random.default_rng(4)
        x = T.Tensor4(rng.standard_normal((1, 8, 4, 4)))
        out, weights, decisions = G.apply_gated_attention(x, branches, gate, mode="soft")
        assert np.max(np.abs(out.data - 0.5 * x.data)) < 1e-15
        assert np.allclose(weights.data.ravel(), 0.25, atol=1e-15)
        assert len(decisions) == 1 and decisions[0].mode == "soft"

    def test_identity_one_hot_passthrough(self):
        branches, gate = zero_setup()
        gate.b2.data[0, 0, 0, 0] = 50.0  # huge identity logit
        gate.tau = 1e-6
        rng = np.random.default_rng(5)
        x = T.Tensor4(rng.standard_normal((1, 8, 4, 4)))
        out, _, decisions = G.apply_gated_attention(x, branches, gate, mode="hard")
        assert np.array_equal(out.data, x.data)
        assert decisions[0].chosen_name == "identity"
        assert np.array_equal(decisions[0].weights, [1.0, 0.0, 0.0, 0.0])

    def test_soft_one_hot_matches_hard_bitwise(self):
        rng = np.random.default_rng(6)
        params, branches, gate = make_setup(rng, tau=1e-6)
        gate.b2.data[0, 2, 0, 0] = 1000.0  # force CA decisively
        x = T.Tensor4(rng.standard_normal((1, 8, 4, 4)))
        soft_out, _, soft_dec = G.apply_gated_attention(x, branches, gate, mode="soft")
        hard_out, _, hard_dec = G.apply_gated_attention(x, branches, gate, mode="hard")
        assert hard_dec[0].chosen == soft_dec[0].chosen == 2
        # one-hot weights make the soft blend equal the chosen branch exactly
        ca_out = A.ca_forward(x, branches["ca"])
        assert np.max(np.abs(soft_out.data - ca_out.data)) < 1e-12
        assert np.array_equal(hard_out.data, ca_out.data)

    def test_soft_converges_to_hard_at_low_tau(self):
        rng = np.random.default_rng(7)
        params, branches, gate = make_setup(rng)
        gate.w2.data[:] = rng.standard_normal(gate.w2.shape) * 2
        gate.b2.data[:] = rng.standard_normal(gate.b2.shape)
        for trial in range(10):
            x = T.Tensor4(rng.standard_normal((1, 8, 4, 4)))
            gate.tau = 1e-6
            soft_out, _, _ = G.apply_gated_attention(x, branches, gate, mode="soft")
            hard_out, _, _ = G.apply_gated_attention(x, branches, gate, mode="hard")
            assert np.max(np.abs(soft_out.data - hard_out.data)) < 1e-6

    def test_budget_zero_forces_identity(self):
        rng = np.random.default_rng(8)
        params, branches, gate = make_setup(rng)
        gate.b2.data[0, 3, 0, 0] = 10.0  # gate prefers cbam
        table = flops.branch_costs(8, 2, 4, 4)
        x = T.Tensor4(rng.standard_normal((1, 8, 4, 4)))
        out, _, decisions = G.apply_gated_attention(
            x, branches, gate, mode="budgeted", budget=0.0, table=table)
        assert decisions[0].chosen_name == "identity"
        assert np.array_equal(out.data, x.data)

    def test_budgeted_requires_budget_and_table(self):
        branches, gate = zero_setup()
        x = T.zeros((1, 8, 2, 2))
        with pytest.raises(ConfigError):
            G.apply_gated_attention(x, branches, gate, mode="budgeted")

    def test_hard_mode_rejects_batch(self):
        branches, gate = zero_setup()
        with pytest.raises(ShapeError):
            G.apply_gated_attention(T.zeros((2, 8, 2, 2)), branches, gate, mode="hard")

    def test_decisions_deterministic(self):
        rng = np.random.default_rng(9)
        params, branches, gate = make_setup(rng)
        x = T.Tensor4(rng.standard_normal((1, 8, 4, 4)))
        a = G.apply_gated_attention(x, branches, gate, mode="soft")
        b = G.apply_gated_attention(x, branches, gate, mode="soft")
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[2][0].weights, b[2][0].weights)

    def test_batched_soft_per_sample_weights(self):
        rng = np.random.default_rng(10)
        params, branches, gate = make_setup(rng)
        gate.w2.data[:] = rng.standard_normal(gate.w2.shape)
        x = T.Tensor4(rng.standard_normal((3, 8, 4, 4)))
        out, weights, decisions = G.apply_gated_attention(x, branches, gate, mode="soft")
        assert out.shape == x.shape and len(decisions) == 3
        # each row must match its own single-sample run
        for row in range(3):
            xi = T.Tensor4(x.data[row:row + 1])
            oi, _, di = G.apply_gated_attention(xi, branches, gate, mode="soft")
            assert np.max(np.abs(out.data[row] - oi.data[0])) < 1e-12
            assert np.allclose(decisions[row].weights, di[0].weights, atol=1e-15)


class TestGateGradients:
    def test_grad_flows_through_gate(self):
        rng = np.random.default_rng(11)
        params = T.ParamSet()
        branches = {
            "se": A.init_se(params, rng, 4, 2),
            "ca": A.init_ca(params, rng, 4, 2),
            "cbam": A.init_cbam(params, rng, 4, 2),
        }
        gate = G.init_gate(params, rng, 4, 2, tau=1.0)
        gate.w2.data[:] = rng.standard_normal(gate.w2.shape) * 0.5
        gate.b2.data[:] = rng.standard_normal(gate.b2.shape) * 0.1
        x = T.Tensor4(rng.standard_normal((1, 4, 3, 3)))

        def loss(ps):
            out, _, _ = G.apply_gated_attention(x, branches, gate, mode="soft")
            return T.sum_all(T.mul_broadcast(out, out))

        err = T.grad_check(loss, params, eps=1e-5)
        assert err < 1e-4, f"gate path rel err {err}"

    def test_gate_weight_gradient_nonzero(self):
        rng = np.random.default_rng(12)
        params = T.ParamSet()
        branches = {
            "se": A.init_se(params, rng, 4, 2),
            "ca": A.init_ca(params, rng, 4, 2),
            "cbam": A.init_cbam(params, rng, 4, 2),
        }
        gate = G.init_gate(params, rng, 4, 2, tau=1.0)
        x = T.Tensor4(rng.standard_normal((1, 4, 3, 3)))
        out, _, _ = G.apply_gated_attention(x, branches, gate, mode="soft")
        grads = T.backprop(T.sum_all(T.mul_broadcast(out, out)), params)
        assert np.any(grads["gate.w2"] != 0.0)
