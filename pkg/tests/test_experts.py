import numpy as np
import pytest

from chunkflow.experts import (
    AdapterBank, MoFStack, active_groups, active_param_count, context_summary, esa_apply, esa_train_step,
    load_bank, load_stack, mof_forward, mof_loss_and_grad, mof_train_step, route_topk, save_bank, save_stack,
    total_param_count,
)
from chunkflow.flow_policy import ContextFeatures, numeric_gradient, max_relative_error


def stack_with_logits(logits, top_k):
    E = len(logits)
    st = MoFStack(3, 2, E, hidden=4, n_experts=E, top_k=top_k, seed=0)
    st.router[...] = np.diag(logits)
    return st, np.ones(E)


class TestRouting:
    def test_hand_softmax(self):
        st, s = stack_with_logits([3.0, 1.0, 2.0, 0.0], 2)
        w, active = route_topk(st, s)
        assert active == [0, 2]
        e = np.exp(1.0)
        np.testing.assert_allclose(w, [e / (e + 1), 0, 1 / (e + 1), 0], rtol=1e-15)
        assert w[0] == pytest.approx(0.731, abs=5e-4)

    def test_full_softmax_when_top_k_is_E(self):
        logits = np.array([0.5, -1.0, 2.0])
        st, s = stack_with_logits(logits, 3)
        w, active = route_topk(st, s)
        assert active == [0, 1, 2]
        np.testing.assert_allclose(w, np.exp(logits) / np.exp(logits).sum(), rtol=1e-15)

    def test_ties_prefer_lower_index(self):
        st, s = stack_with_logits([1.0, 1.0, 1.0, 1.0], 2)
        w, active = route_topk(st, s)
        assert active == [0, 1]
        assert np.array_equal(w, [0.5, 0.5, 0, 0])

    def test_sparsity(self, rng):
        st = MoFStack(5, 3, 6, n_experts=5, top_k=3, seed=1)
        for _ in range(50):
            w, active = route_topk(st, rng.standard_normal(6))
            assert np.count_nonzero(w) == 3 == len(active)
            assert abs(w.sum() - 1) <= 1e-12

    def test_non_finite_summary(self):
        st, _ = stack_with_logits([1.0, 2.0], 1)
        with pytest.raises(ValueError):
            route_topk(st, [np.nan, 0.0])

    def test_bad_top_k(self):
        with pytest.raises(ValueError):
            MoFStack(2, 2, 2, n_experts=2, top_k=3)


class TestForward:
    def test_dense_sum_oracle(self, rng):
        st = MoFStack(5, 3, 4, hidden=7, n_experts=4, top_k=2, seed=3)
        for _ in range(20):
            x, s = rng.standard_normal(5), rng.standard_normal(4)
            h = x
            for W, b in st.foundation:
                h = np.tanh(W @ h + b)
            w, _ = route_topk(st, s)
            dense = np.zeros(3)
            for e in range(4):
                if w[e] != 0:
                    dense += w[e] * (st.experts[e][0] @ h + st.experts[e][1])
            assert np.array_equal(mof_forward(st, x, s), dense)

    def test_single_expert(self, rng):
        st = MoFStack(4, 2, 3, n_experts=1, top_k=1, seed=2)
        x = rng.standard_normal(4)
        h = x
        for W, b in st.foundation:
            h = np.tanh(W @ h + b)
        assert np.array_equal(mof_forward(st, x, rng.standard_normal(3)), st.experts[0][0] @ h + st.experts[0][1])

    def test_identical_specialists_ignore_routing(self, rng):
        st = MoFStack(4, 2, 3, n_experts=3, top_k=2, seed=2)
        for W, b in st.experts[1:]:
            W[...] = st.experts[0][0]
            b[...] = st.experts[0][1]
        x = rng.standard_normal(4)
        outs = [mof_forward(st, x, rng.standard_normal(3)) for _ in range(10)]
        for o in outs[1:]:
            np.testing.assert_allclose(o, outs[0], rtol=1e-14, atol=1e-15)


class TestIsolation:
    def test_gradient_matches_finite_differences(self, rng):
        st = MoFStack(4, 3, 5, hidden=6, n_experts=4, top_k=2, seed=4)
        x, s, y = rng.standard_normal(4), rng.standard_normal(5), rng.standard_normal(3)
        _, g = mof_loss_and_grad(st, x, s, y)
        num = numeric_gradient(lambda: mof_loss_and_grad(st, x, s, y)[0], st.theta, 1e-6)
        assert max_relative_error(g, num) < 1e-5

    def test_unselected_experts_bit_identical(self, rng):
        st = MoFStack(4, 3, 5, n_experts=4, top_k=1, seed=5)
        for _ in range(25):
            s = rng.standard_normal(5)
            _, (j,) = route_topk(st, s)
            before = st.theta.copy()
            mof_train_step(st, rng.standard_normal(4), s, rng.standard_normal(3), 0.05)
            for e in range(4):
                sl = st.expert_slice(e)
                same = np.array_equal(st.theta[sl], before[sl])
                assert same == (e != j)
                if e != j:
                    old_router = before[-st.router.size:].reshape(st.router.shape)
                    assert np.array_equal(st.router[e], old_router[e])


class TestAdapters:
    def test_masked_update(self, rng):
        bank = AdapterBank(3, 4, 2, seed=1)
        W2, b2 = bank.W[2].copy(), bank.b[2].copy()
        feats = {0: rng.standard_normal(4), 1: rng.standard_normal(4)}
        esa_train_step(bank, {0, 1}, feats, {0: np.ones(2), 1: np.zeros(2)}, 0.1)
        assert np.array_equal(bank.W[2], W2) and np.array_equal(bank.b[2], b2)
        assert list(bank.update_counts) == [1, 1, 0]

    def test_overlapping_embodiments_update_counts(self, rng):
        bank = AdapterBank(3, 4, 2, seed=1)
        for i in range(10):
            active = (0, 1) if i % 2 == 0 else (1, 2)
            esa_train_step(bank, active, {k: rng.standard_normal(4) for k in active},
                           {k: rng.standard_normal(2) for k in active}, 0.05)
        assert list(bank.update_counts) == [5, 10, 5]

    def test_zero_adapter_outputs_bias(self, rng):
        bank = AdapterBank(2, 3, 2, zero=True)
        bank.b[1] = [0.5, -0.5]
        out = esa_apply(bank, {1}, {1: rng.standard_normal(3)})
        assert np.array_equal(out[1], [0.5, -0.5])

    def test_inactive_feature_rejected(self, rng):
        bank = AdapterBank(3, 2, 2)
        with pytest.raises(ValueError):
            esa_apply(bank, {0}, {0: np.ones(2), 2: np.ones(2)})
        with pytest.raises(ValueError):
            esa_apply(bank, {0, 1}, {0: np.ones(2)})


def test_param_accounting(layout, fleet):
    st = MoFStack(6, 3, 4, hidden=5, foundation_depth=2, n_experts=4, top_k=2)
    bank = AdapterBank(len(layout.groups), 4, 4)
    groups = active_groups(fleet["arm_gripper_20hz"], layout)
    n = active_param_count(st, bank, groups)
    assert n == (6 * 5 + 5 + 5 * 5 + 5) + 4 * 4 + 2 * (3 * 5 + 3) + len(groups) * 20
    assert n < total_param_count(st, bank)
    assert total_param_count(st, bank) == st.theta.size + bank.W.size + bank.b.size


def test_context_summary():
    ctx = ContextFeatures.build(state=np.ones((2, 3)), embodiment=1)
    np.testing.assert_array_equal(context_summary(ctx, 3), [1, 1, 1, 0, 1, 0])


def test_serialization(tmp_path):
    st = MoFStack(4, 2, 3, hidden=5, n_experts=3, top_k=2, seed=7)
    save_stack(tmp_path / "s.bin", st, seed=7)
    assert np.array_equal(load_stack(tmp_path / "s.bin").theta, st.theta)
    bank = AdapterBank(3, 2, 4, seed=2)
    save_bank(tmp_path / "b.bin", bank)
    back = load_bank(tmp_path / "b.bin")
    assert np.array_equal(back.W, bank.W) and np.array_equal(back.b, bank.b)
