"""Routing, sparse dispatch, replicated initialization, and the balance loss."""

import numpy as np
import pytest

from avmoe.errors import ConfigError
from avmoe.moe import LoadStats, MoEConfig, MoELayer, init_from_dense, load_balance_loss
from avmoe.nn import FeedForward
from avmoe.optim import Adam
from avmoe.tensor import Tensor

from helpers import check_grad


def make_layer(num_experts=8, top_k=4, renorm=True, hidden=6, ffn_hidden=12, seed=0):
    cfg = MoEConfig(
        num_experts=num_experts,
        top_k=top_k,
        renormalize_topk=renorm,
        hidden=hidden,
        ffn_hidden=ffn_hidden,
    )
    return MoELayer(cfg, np.random.default_rng(seed))


def stats_from_probs(probs: np.ndarray) -> LoadStats:
    tokens, num_experts = probs.shape
    counts = np.bincount(probs.argmax(axis=1), minlength=num_experts).astype(np.float64)
    return LoadStats(
        hard_counts=counts,
        prob_sum=Tensor(probs.sum(axis=0)),
        tokens=tokens,
        dispatched=0,
    )


class TestRouting:
    def test_zero_router_routes_uniformly(self):
        layer = make_layer()
        x = Tensor(np.random.default_rng(1).normal(size=(5, 6)))
        decision = layer.route(x)
        np.testing.assert_allclose(decision.probs.data, 0.125, atol=1e-15)
        np.testing.assert_array_equal(decision.indices, np.tile([0, 1, 2, 3], (5, 1)))

    def test_two_expert_closed_form(self):
        for renorm, expected_weight in ((False, 0.75), (True, 1.0)):
            layer = make_layer(num_experts=2, top_k=1, renorm=renorm, hidden=2, ffn_hidden=4)
            # logits = x @ router = (0, ln 3) for x = (1, 0)
            layer.router.data = np.array([[0.0, np.log(3.0)], [0.0, 0.0]])
            decision = layer.route(Tensor([[1.0, 0.0]]))
            np.testing.assert_allclose(decision.probs.data, [[0.25, 0.75]], atol=1e-12)
            assert decision.indices.tolist() == [[1]]
            np.testing.assert_allclose(decision.weights.data, [[expected_weight]], atol=1e-12)

    def test_router_logit_shift_invariance(self):
        layer = make_layer(hidden=4, ffn_hidden=8)
        rng = np.random.default_rng(2)
        layer.router.data = rng.normal(size=(4, 8))
        x = Tensor(np.ones((3, 4)))
        base = layer.route(x)
        # Adding c/hidden to every router entry shifts each logit by c.
        shifted_layer = make_layer(hidden=4, ffn_hidden=8)
        shifted_layer.router.data = layer.router.data + 2.5 / 4
        shifted = shifted_layer.route(x)
        np.testing.assert_allclose(shifted.probs.data, base.probs.data, atol=1e-12)
        np.testing.assert_array_equal(shifted.indices, base.indices)
        np.testing.assert_allclose(shifted.weights.data, base.weights.data, atol=1e-12)

    def test_probability_rows_sum_to_one(self):
        layer = make_layer(hidden=4, ffn_hidden=8)
        layer.router.data = np.random.default_rng(3).normal(size=(4, 8))
        x = Tensor(np.random.default_rng(4).normal(size=(9, 4)))
        decision = layer.route(x)
        np.testing.assert_allclose(decision.probs.data.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(decision.weights.data.sum(axis=1), 1.0, atol=1e-12)


class TestForward:
    def test_full_ensemble_of_identical_experts_is_dense(self):
        # K = E: weights sum to 1 with or without renormalization.
        for renorm in (True, False):
            layer = make_layer(num_experts=4, top_k=4, renorm=renorm)
            donor = layer.experts[0]
            for expert in layer.experts:
                expert.copy_weights_from(donor)
            x = Tensor(np.random.default_rng(5).normal(size=(7, 6)))
            out, _ = layer(x)
            np.testing.assert_allclose(out.data, donor(x).data, atol=1e-12)

    def test_raw_top4_of_uniform_gives_half_ffn(self):
        layer = make_layer(num_experts=8, top_k=4, renorm=False)
        donor = layer.experts[0]
        for expert in layer.experts:
            expert.copy_weights_from(donor)
        x = Tensor(np.random.default_rng(6).normal(size=(5, 6)))
        out, _ = layer(x)
        np.testing.assert_allclose(out.data, 0.5 * donor(x).data, atol=1e-12)

    def test_renormalized_top4_of_uniform_is_identity(self):
        layer = make_layer(num_experts=8, top_k=4, renorm=True)
        donor = layer.experts[0]
        for expert in layer.experts:
            expert.copy_weights_from(donor)
        x = Tensor(np.random.default_rng(7).normal(size=(5, 6)))
        out, _ = layer(x)
        np.testing.assert_allclose(out.data, donor(x).data, atol=1e-12)

    def test_sparsity_dispatch_count_is_k_times_tokens(self):
        for seed in range(5):
            layer = make_layer()
            layer.router.data = np.random.default_rng(seed).normal(size=(6, 8))
            tokens = 3 + seed
            x = Tensor(np.random.default_rng(seed + 10).normal(size=(tokens, 6)))
            _, stats = layer(x)
            assert stats.dispatched == 4 * tokens

    def test_expert_permutation_leaves_output_unchanged(self):
        layer = make_layer(hidden=4, ffn_hidden=8)
        rng = np.random.default_rng(8)
        layer.router.data = rng.normal(size=(4, 8))
        x = Tensor(rng.normal(size=(6, 4)))
        base, _ = layer(x)

        perm = rng.permutation(8)
        permuted = make_layer(hidden=4, ffn_hidden=8)
        permuted.router.data = layer.router.data[:, perm]
        for new_pos, old_pos in enumerate(perm):
            permuted.experts[new_pos].copy_weights_from(layer.experts[old_pos])
        out, _ = permuted(x)
        np.testing.assert_allclose(out.data, base.data, atol=1e-12, rtol=0)

    def test_gradients_reach_experts_and_router(self):
        layer = make_layer(num_experts=3, top_k=2, hidden=4, ffn_hidden=6)
        rng = np.random.default_rng(9)
        layer.router.data = rng.normal(size=(4, 3))
        x = Tensor(rng.uniform(-1, 1, (5, 4)))
        weights = Tensor(rng.normal(size=(5, 4)))
        check_grad(lambda: (layer(x)[0] * weights).sum(), layer.parameters(), tol=1e-4)


class TestInitFromDense:
    def test_experts_are_bit_exact_copies(self):
        rng = np.random.default_rng(10)
        donor = FeedForward(rng, 6, 12)
        layer = init_from_dense(donor, MoEConfig(hidden=6, ffn_hidden=12))
        x = Tensor(rng.normal(size=(4, 6)))
        expected = donor(x).data
        for expert in layer.experts:
            np.testing.assert_array_equal(expert(x).data, expected)
        assert np.all(layer.router.data == 0.0)

    def test_forward_matches_donor_after_init(self):
        rng = np.random.default_rng(11)
        donor = FeedForward(rng, 6, 12)
        layer = init_from_dense(donor, MoEConfig(num_experts=8, top_k=4, hidden=6, ffn_hidden=12))
        for seed in range(100):
            x = Tensor(np.random.default_rng(seed).normal(size=(3, 6)))
            out, _ = layer(x)
            np.testing.assert_allclose(out.data, donor(x).data, atol=1e-12)

    def test_experts_diverge_after_one_step_with_distinct_gradients(self):
        rng = np.random.default_rng(12)
        donor = FeedForward(rng, 4, 8)
        layer = init_from_dense(donor, MoEConfig(num_experts=4, top_k=2, hidden=4, ffn_hidden=8))
        # Distinct routing per token so different experts see different data.
        layer.router.data = rng.normal(size=(4, 4))
        x = Tensor(rng.normal(size=(6, 4)))
        out, _ = layer(x)
        (out * Tensor(rng.normal(size=out.shape))).sum().backward()
        opt = Adam(layer.named_parameters(), lr=1e-2)
        opt.step()
        first = layer.experts[0].lin1.weight.data
        assert any(
            not np.array_equal(first, e.lin1.weight.data) for e in layer.experts[1:]
        )

    def test_shape_mismatch_rejected(self):
        donor = FeedForward(np.random.default_rng(0), 4, 8)
        with pytest.raises(ConfigError):
            init_from_dense(donor, MoEConfig(hidden=6, ffn_hidden=12))


class TestBalanceLoss:
    def test_uniform_routing_scores_one(self):
        probs = np.full((10, 8), 0.125)
        loss = load_balance_loss(stats_from_probs(probs), 8)
        np.testing.assert_allclose(loss.item(), 1.0, atol=1e-12)

    def test_collapse_scores_num_experts(self):
        probs = np.zeros((10, 8))
        probs[:, 2] = 1.0
        loss = load_balance_loss(stats_from_probs(probs), 8)
        np.testing.assert_allclose(loss.item(), 8.0, atol=1e-12)

    def test_two_expert_hand_case(self):
        probs = np.array([[0.8, 0.2], [0.6, 0.4]])
        loss = load_balance_loss(stats_from_probs(probs), 2)
        np.testing.assert_allclose(loss.item(), 1.4, atol=1e-12)

    def test_at_least_one_when_fractions_match_probs(self):
        # E * sum(p^2) >= 1 by Cauchy-Schwarz, equality only at uniform.
        rng = np.random.default_rng(13)
        for _ in range(50):
            p = rng.dirichlet(np.ones(6))
            stats = LoadStats(
                hard_counts=p * 100, prob_sum=Tensor(p * 100), tokens=100, dispatched=0
            )
            assert load_balance_loss(stats, 6).item() >= 1.0 - 1e-12

    def test_gradient_flows_through_probabilities_only(self):
        probs = Tensor(np.array([[0.7, 0.3], [0.4, 0.6]]), requires_grad=True)
        stats = LoadStats(
            hard_counts=np.array([1.0, 1.0]),
            prob_sum=probs.sum(axis=0),
            tokens=2,
            dispatched=0,
        )
        load_balance_loss(stats, 2).backward()
        # d/dp of 2 * (0.5*F dot mean) -> each entry sees num_experts * F_i / T
        np.testing.assert_allclose(probs.grad, [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)

    def test_invariants_of_collected_stats(self):
        layer = make_layer(hidden=4, ffn_hidden=8)
        layer.router.data = np.random.default_rng(14).normal(size=(4, 8))
        x = Tensor(np.random.default_rng(15).normal(size=(11, 4)))
        _, stats = layer(x)
        np.testing.assert_allclose(stats.assign_fraction.sum(), 1.0, atol=1e-12)
        np.testing.assert_allclose(stats.mean_prob.data.sum(), 1.0, atol=1e-12)
        assert (stats.assign_fraction >= 0).all() and (stats.mean_prob.data >= 0).all()

    def test_merge_accumulates(self):
        a = stats_from_probs(np.full((4, 2), 0.5))
        b = stats_from_probs(np.array([[0.9, 0.1]]))
        merged = LoadStats.merge([a, b])
        assert merged.tokens == 5
        np.testing.assert_allclose(merged.prob_sum.data, [2.9, 2.1], atol=1e-12)

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            MoEConfig(num_experts=4, top_k=5).validate()
        with pytest.raises(ConfigError):
            MoEConfig(top_k=0).validate()
