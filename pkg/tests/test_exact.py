import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from netbounds.exact import (
    EnumerationTooLarge,
    exact_log_marginal,
    kl_q_to_posterior,
    posterior_marginals,
    sigma_std,
)
from netbounds.network import NEG_INF, Network, joint_log_prob, layer_evidence

from conftest import all_states, random_bipartite, sampled_evidence


class TestExactMarginal:
    def test_full_evidence_is_joint(self, rng):
        net = random_bipartite(rng, "sigmoid", 3, 3)
        s = rng.integers(0, 2, 6)
        ev = {i: int(b) for i, b in enumerate(s)}
        res = exact_log_marginal(net, ev)
        assert res.log_marginal == pytest.approx(joint_log_prob(net, s), abs=1e-14)
        assert res.enumerated_states == 1

    def test_one_by_one_by_hand(self):
        net = Network.bipartite("sigmoid", np.array([[1.0]]))
        res = exact_log_marginal(net, {1: 1})
        assert res.log_marginal == pytest.approx(math.log(0.5 * 0.5 + 0.5 * expit(1.0)), abs=1e-15)
        assert math.exp(res.log_marginal) == pytest.approx(0.61557, abs=1e-4)
        assert res.enumerated_states == 2

    def test_noisy_or_all_zero_closed_form(self, rng):
        net = random_bipartite(rng, "noisy_or", 5, 6)
        l1, l2, W, p = net.bipartite_view()
        closed = np.log(p * np.exp(-W.sum(axis=0)) + 1 - p).sum()
        got = exact_log_marginal(net, layer_evidence(net, np.zeros(5, int))).log_marginal
        assert got == pytest.approx(closed, abs=1e-12)

    def test_impossible_evidence(self):
        net = Network.bipartite("noisy_or", np.array([[1.0]]), 0.0)
        assert exact_log_marginal(net, {1: 1}).log_marginal == NEG_INF

    def test_cap(self, rng):
        net = random_bipartite(rng, "sigmoid", 2, 6)
        with pytest.raises(EnumerationTooLarge):
            exact_log_marginal(net, {}, cap=5)

    def test_marginalization_consistency(self, rng):
        for kind in ("sigmoid", "noisy_or"):
            net = random_bipartite(rng, kind, 4, 4)
            total = sum(
                math.exp(exact_log_marginal(net, layer_evidence(net, bits)).log_marginal)
                for bits in all_states(4)
            )
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_label_permutation_invariance(self, rng):
        W = rng.normal(0, 2, (4, 5))
        p = rng.uniform(0.1, 0.9, 5)
        perm = rng.permutation(5)
        a = Network.bipartite("sigmoid", W, p)
        b = Network.bipartite("sigmoid", W[:, perm], p[perm])
        bits = rng.integers(0, 2, 4)
        la = exact_log_marginal(a, layer_evidence(a, bits)).log_marginal
        lb = exact_log_marginal(b, layer_evidence(b, bits)).log_marginal
        assert la == pytest.approx(lb, abs=1e-12)


class TestPosterior:
    def test_independent_posterior_is_prior(self, rng):
        p = rng.uniform(0.1, 0.9, 4)
        net = Network.bipartite("sigmoid", np.zeros((3, 4)), p)
        post = posterior_marginals(net, layer_evidence(net, [1, 0, 1]))
        np.testing.assert_allclose(post, p, atol=1e-12)

    def test_two_hidden_by_hand(self):
        W = np.array([[1.5, -0.7]])
        p = np.array([0.3, 0.6])
        net = Network.bipartite("sigmoid", W, p)
        # hand Bayes rule over the four parent states
        weights = {}
        for s0, s1 in itertools.product([0, 1], repeat=2):
            prior = (p[0] if s0 else 1 - p[0]) * (p[1] if s1 else 1 - p[1])
            weights[s0, s1] = prior * expit(W[0, 0] * s0 + W[0, 1] * s1)
        z = sum(weights.values())
        want = [(weights[1, 0] + weights[1, 1]) / z, (weights[0, 1] + weights[1, 1]) / z]
        np.testing.assert_allclose(posterior_marginals(net, {2: 1}), want, atol=1e-14)

    def test_zero_probability_evidence(self):
        net = Network.bipartite("noisy_or", np.array([[1.0]]), 0.0)
        with pytest.raises(ValueError, match="probability zero"):
            posterior_marginals(net, {1: 1})

    def test_in_unit_interval(self, rng):
        net = random_bipartite(rng, "noisy_or", 4, 4, scale=2.0)
        post = posterior_marginals(net, sampled_evidence(net, rng))
        assert np.all((post >= 0) & (post <= 1))


class TestKL:
    def test_zero_when_posterior_factorizes(self, rng):
        p = rng.uniform(0.1, 0.9, 3)
        net = Network.bipartite("sigmoid", np.zeros((2, 3)), p)
        assert kl_q_to_posterior(p, net, {3: 1, 4: 0}) == pytest.approx(0.0, abs=1e-14)

    def test_nonnegative(self, rng):
        for _ in range(20):
            net = random_bipartite(rng, "sigmoid", 3, 4, scale=2.0)
            mu = rng.uniform(0, 1, 4)
            assert kl_q_to_posterior(mu, net, sampled_evidence(net, rng)) >= 0.0

    def test_infinite_on_impossible_support(self):
        net = Network.bipartite("noisy_or", np.array([[1.0, 1.0]]), 0.5)
        # Q puts mass on both parents off while the child is on
        assert kl_q_to_posterior(np.array([0.5, 0.5]), net, {2: 1}) == math.inf


class TestSigmaStd:
    def test_zero_weights(self):
        net = Network.bipartite("sigmoid", np.zeros((3, 3)))
        assert sigma_std(net) == 0.0

    def test_by_hand(self):
        net = Network.bipartite("sigmoid", np.array([[2.0]]), 0.5)
        v = np.array([0.5, expit(2.0)])
        assert sigma_std(net) == pytest.approx(abs(v[1] - v[0]) / 2, abs=1e-15)

    @pytest.mark.parametrize("kind", ["sigmoid", "noisy_or"])
    def test_bounded_by_half(self, rng, kind):
        for _ in range(20):
            net = random_bipartite(rng, kind, 4, 4, scale=10.0)
            assert 0.0 <= sigma_std(net) <= 0.5

    def test_monte_carlo_agrees(self, rng):
        for kind in ("sigmoid", "noisy_or"):
            net = random_bipartite(rng, kind, 8, 8, scale=1.0, priors=np.full(8, 0.5))
            exact = sigma_std(net)
            mc = sigma_std(net, mode="monte_carlo", samples=100_000, rng=np.random.default_rng(4))
            assert abs(exact - mc) < 0.01

    def test_relabel_invariance(self, rng):
        W = rng.normal(0, 2, (3, 5))
        perm = rng.permutation(5)
        a = Network.bipartite("sigmoid", W)
        b = Network.bipartite("sigmoid", W[:, perm])
        assert sigma_std(a) == pytest.approx(sigma_std(b), abs=1e-15)

    def test_fan_in_cap(self, rng):
        net = random_bipartite(rng, "sigmoid", 2, 6)
        with pytest.raises(EnumerationTooLarge):
            sigma_std(net, cap=5)

    def test_monte_carlo_needs_rng(self, rng):
        with pytest.raises(ValueError, match="rng"):
            sigma_std(random_bipartite(rng, "sigmoid", 2, 2), mode="monte_carlo")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n1=st.integers(1, 4), n2=st.integers(1, 5))
def test_marginal_never_positive(seed, n1, n2):
    r = np.random.default_rng(seed)
    net = random_bipartite(r, "noisy_or" if seed % 2 else "sigmoid", n1, n2, scale=2.0)
    assert exact_log_marginal(net, sampled_evidence(net, r)).log_marginal <= 0.0
