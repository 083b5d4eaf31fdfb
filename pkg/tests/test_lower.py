import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netbounds.exact import exact_log_marginal, kl_q_to_posterior, posterior_marginals
from netbounds.network import Network, hidden_nodes, joint_log_prob, layer_evidence
from netbounds.lower import (
    DEFAULT_EXPANSION_TERMS,
    LowerBoundOptions,
    entropy_q,
    lb_noisy_or_eval_quadratic,
    lb_noisy_or_eval_simple,
    lb_optimize,
    lb_sigmoid_eval,
    lower_bound,
    write_trace_csv,
)
from netbounds.transforms import log_noisy_or_expansion

from conftest import all_states, random_bipartite, sampled_evidence

AUX = LowerBoundOptions(sigmoid_expectation="aux")


def random_dag(rng, kind, n):
    edges = []
    for c in range(n):
        for p in range(c):
            if rng.random() < 0.5:
                w = rng.normal(0, 1.5) if kind == "sigmoid" else rng.exponential(1.0)
                edges.append((c, p, w))
    children = {c for c, _, _ in edges}
    priors = {j: rng.uniform(0.1, 0.9) for j in range(n) if j not in children}
    return Network.from_edges(kind, n, edges, priors)


def possible_evidence(net, rng, k):
    """Observe ``k`` random nodes at a jointly sampled state (so P(ev) > 0)."""
    from netbounds.network import ancestral_sample

    s = ancestral_sample(net, rng)
    nodes = rng.choice(net.n, size=k, replace=False)
    return {int(i): int(s[i]) for i in nodes}


class TestEntropy:
    def test_half(self):
        assert entropy_q(np.full(7, 0.5)) == pytest.approx(7 * math.log(2), abs=1e-14)

    def test_degenerate(self):
        assert entropy_q(np.array([0.0, 1.0, 1.0])) == 0.0

    def test_matches_enumeration(self, rng):
        for m in (1, 4, 10):
            mu = rng.random(m)
            S = all_states(m)
            q = np.prod(np.where(S == 1, mu, 1 - mu), axis=1)
            assert entropy_q(mu) == pytest.approx(-(q * np.log(q)).sum(), abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            entropy_q(np.array([1.5]))


class TestSigmoidEval:
    def test_zero_weights_priors_exact(self, rng):
        p = rng.uniform(0.1, 0.9, 4)
        net = Network.bipartite("sigmoid", np.zeros((3, 4)), p)
        ev = layer_evidence(net, [1, 0, 1])
        for opts in (LowerBoundOptions(), AUX):
            assert lb_sigmoid_eval(net, ev, p, opts) == pytest.approx(3 * math.log(0.5), abs=1e-12)

    @pytest.mark.parametrize("opts", [LowerBoundOptions(), AUX], ids=["exact", "aux"])
    def test_random_mu_below_oracle(self, rng, opts):
        for _ in range(50):
            net = random_bipartite(rng, "sigmoid", 4, 4, scale=2.0)
            ev = sampled_evidence(net, rng)
            exact = exact_log_marginal(net, ev).log_marginal
            assert lb_sigmoid_eval(net, ev, rng.random(4), opts) <= exact + 1e-9

    def test_gap_is_kl(self, rng):
        for _ in range(30):
            net = random_bipartite(rng, "sigmoid", 4, 4, scale=2.0)
            ev = sampled_evidence(net, rng)
            mu = rng.uniform(0.01, 0.99, 4)
            gap = exact_log_marginal(net, ev).log_marginal - lb_sigmoid_eval(net, ev, mu)
            assert gap == pytest.approx(kl_q_to_posterior(mu, net, ev), abs=1e-9)

    def test_gap_is_kl_generic_dag(self, rng):
        for _ in range(20):
            net = random_dag(rng, "sigmoid", 7)
            ev = possible_evidence(net, rng, 3)
            mu = rng.uniform(0.01, 0.99, 4)
            gap = exact_log_marginal(net, ev).log_marginal - lb_sigmoid_eval(net, ev, mu)
            assert gap == pytest.approx(kl_q_to_posterior(mu, net, ev), abs=1e-9)

    def test_aux_below_exact_mode(self, rng):
        for _ in range(30):
            net = random_bipartite(rng, "sigmoid", 4, 5, scale=2.0)
            ev = sampled_evidence(net, rng)
            mu = rng.random(5)
            assert lb_sigmoid_eval(net, ev, mu, AUX) <= lb_sigmoid_eval(net, ev, mu) + 1e-12

    def test_fan_in_cap(self, rng):
        net = random_bipartite(rng, "sigmoid", 2, 6)
        with pytest.raises(ValueError, match="cap"):
            lb_sigmoid_eval(net, layer_evidence(net, [1, 0]), np.full(6, 0.5), LowerBoundOptions(fan_in_cap=4))

    def test_kind_mismatch(self, rng):
        net = random_bipartite(rng, "noisy_or", 2, 2)
        with pytest.raises(ValueError):
            lb_sigmoid_eval(net, layer_evidence(net, [1, 0]), np.full(2, 0.5))


class TestNoisyOrEval:
    def test_zero_weights_priors_exact(self, rng):
        p = rng.uniform(0.1, 0.9, 4)
        net = Network.bipartite("noisy_or", np.zeros((3, 4)), p)
        ev = layer_evidence(net, [0, 0, 0])
        assert lb_noisy_or_eval_simple(net, ev, p) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("N", [1, 4, 16, 40])
    def test_single_edge_is_truncated_expansion(self, N):
        theta = 0.8
        net = Network.bipartite("noisy_or", np.array([[theta]]), 1.0)
        ev = {0: 1, 1: 1}
        got = lb_noisy_or_eval_simple(net, ev, np.zeros(0), n_terms=N)
        assert got == pytest.approx(float(log_noisy_or_expansion(theta, N)), abs=1e-14)
        # the truncated expansion sits above log(1 - e^-theta)
        assert got >= math.log(-math.expm1(-theta)) - 1e-15

    def test_more_terms_never_raise_bound(self, rng):
        # each extra factor contributes -log(1 + X) <= 0 for on nodes
        for _ in range(20):
            net = random_bipartite(rng, "noisy_or", 4, 4)
            ev = sampled_evidence(net, rng)
            mu = rng.random(4)
            vals = [lb_noisy_or_eval_simple(net, ev, mu, n_terms=N) for N in (1, 2, 4, 8, 16, 32, 40)]
            assert np.all(np.diff(vals) <= 1e-15)

    def test_random_mu_below_oracle(self, rng):
        for _ in range(50):
            net = random_bipartite(rng, "noisy_or", 4, 4)
            ev = sampled_evidence(net, rng)
            exact = exact_log_marginal(net, ev).log_marginal
            mu = rng.random(4)
            assert lb_noisy_or_eval_simple(net, ev, mu) <= exact + 1e-9
            assert lb_noisy_or_eval_quadratic(net, ev, mu) <= exact + 1e-9

    def test_quadratic_dominates_simple(self, rng):
        for _ in range(50):
            net = random_bipartite(rng, "noisy_or", 4, 4)
            ev = sampled_evidence(net, rng)
            mu = rng.random(4)
            assert lb_noisy_or_eval_quadratic(net, ev, mu) >= lb_noisy_or_eval_simple(net, ev, mu) - 1e-12

    def test_zero_curvature_is_simple(self, rng):
        for _ in range(20):
            net = random_bipartite(rng, "noisy_or", 4, 4)
            ev = sampled_evidence(net, rng)
            mu = rng.random(4)
            a = lb_noisy_or_eval_quadratic(net, ev, mu, curvature=False)
            assert a == pytest.approx(lb_noisy_or_eval_simple(net, ev, mu), abs=1e-12)

    def test_generic_dag_below_oracle(self, rng):
        for _ in range(20):
            net = random_dag(rng, "noisy_or", 7)
            ev = possible_evidence(net, rng, 3)
            exact = exact_log_marginal(net, ev).log_marginal
            mu = rng.random(4)
            assert lb_noisy_or_eval_simple(net, ev, mu) <= exact + 1e-9
            assert lb_noisy_or_eval_quadratic(net, ev, mu) <= exact + 1e-9

    def test_short_expansion_can_overshoot(self):
        # with few terms, leaving mass on "no parent on" costs only N log 2,
        # so the optimized value may exceed log P by roughly 2^-N
        net = Network.bipartite("noisy_or", np.array([[1.4]]), 0.5)
        ev = {1: 1}
        exact = exact_log_marginal(net, ev).log_marginal
        short = lower_bound(net, ev, LowerBoundOptions(expansion_terms=16)).log_bound
        assert 0 < short - exact < 2.0**-16
        assert lower_bound(net, ev).log_bound <= exact + 1e-12


class TestOptimize:
    @pytest.mark.parametrize("kind", ["sigmoid", "noisy_or"])
    def test_zero_weights_recover_priors(self, rng, kind):
        p = rng.uniform(0.1, 0.9, 4)
        net = Network.bipartite(kind, np.zeros((3, 4)), p)
        ev = layer_evidence(net, [0, 0, 0])
        res = lower_bound(net, ev)
        np.testing.assert_allclose(res.final_mu, p, atol=1e-6)
        assert res.log_bound == pytest.approx(exact_log_marginal(net, ev).log_marginal, abs=1e-9)

    def test_noisy_or_all_zero_exact(self, rng):
        for _ in range(10):
            net = random_bipartite(rng, "noisy_or", 6, 6, scale=2.0)
            ev = layer_evidence(net, np.zeros(6, int))
            res = lower_bound(net, ev)
            assert res.log_bound == pytest.approx(exact_log_marginal(net, ev).log_marginal, abs=1e-9)
            # the exact posterior factorizes here
            np.testing.assert_allclose(res.final_mu, posterior_marginals(net, ev), atol=1e-5)

    @pytest.mark.parametrize(
        "kind,opts",
        [
            ("sigmoid", LowerBoundOptions()),
            ("sigmoid", AUX),
            ("noisy_or", LowerBoundOptions()),
            ("noisy_or", LowerBoundOptions(use_quadratic=True)),
        ],
        ids=["sigmoid-exact", "sigmoid-aux", "noisy-or", "noisy-or-quad"],
    )
    def test_sound_and_monotone(self, rng, kind, opts):
        opts = LowerBoundOptions(**{**opts.__dict__, "trace": True})
        for _ in range(30):
            net = random_bipartite(rng, kind, 5, 5, scale=2.0)
            ev = sampled_evidence(net, rng)
            res = lb_optimize(net, ev, opts)
            assert res.log_bound <= exact_log_marginal(net, ev).log_marginal + 1e-9
            vals = np.array([v for _, v in res.trace])
            assert np.all(np.diff(vals) >= -1e-12 * np.maximum(1.0, np.abs(vals[1:])))
            assert vals[-1] == pytest.approx(res.log_bound, abs=1e-12)

    def test_kl_identity_at_optimum(self, rng):
        for _ in range(20):
            net = random_bipartite(rng, "sigmoid", 4, 4, scale=2.0)
            ev = sampled_evidence(net, rng)
            res = lower_bound(net, ev)
            gap = exact_log_marginal(net, ev).log_marginal - res.log_bound
            assert gap == pytest.approx(kl_q_to_posterior(res.final_mu, net, ev), abs=1e-9)

    def test_generic_dag(self, rng):
        for kind in ("sigmoid", "noisy_or"):
            for _ in range(10):
                net = random_dag(rng, kind, 8)
                ev = possible_evidence(net, rng, 3)
                res = lower_bound(net, ev)
                assert res.log_bound <= exact_log_marginal(net, ev).log_marginal + 1e-9

    def test_mu_in_unit_interval(self, rng):
        net = random_bipartite(rng, "noisy_or", 6, 6, scale=2.0)
        res = lower_bound(net, layer_evidence(net, np.ones(6, int)))
        assert np.all((res.final_mu >= 0) & (res.final_mu <= 1))
        assert len(res.final_mu) == len(hidden_nodes(net, layer_evidence(net, np.ones(6, int))))

    def test_sweep_cap_flagged(self, rng):
        net = random_bipartite(rng, "sigmoid", 6, 6, scale=3.0)
        ev = sampled_evidence(net, rng)
        res = lower_bound(net, ev, LowerBoundOptions(max_sweeps=1))
        assert not res.converged
        assert res.log_bound <= exact_log_marginal(net, ev).log_marginal + 1e-9

    def test_default_terms(self):
        assert LowerBoundOptions().expansion_terms == DEFAULT_EXPANSION_TERMS

    def test_bad_options(self):
        with pytest.raises(ValueError):
            LowerBoundOptions(sigmoid_expectation="bogus")
        with pytest.raises(ValueError):
            LowerBoundOptions(expansion_terms=0)

    def test_trace_csv(self, tmp_path, rng):
        net = random_bipartite(rng, "sigmoid", 3, 3)
        res = lower_bound(net, sampled_evidence(net, rng), LowerBoundOptions(trace=True))
        path = tmp_path / "lb.csv"
        write_trace_csv(res, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "sweep,log_bound"
        assert len(lines) == len(res.trace) + 1


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n1=st.integers(1, 5),
    n2=st.integers(1, 5),
    kind=st.sampled_from(["sigmoid", "noisy_or"]),
    scale=st.floats(0.05, 4.0),
)
def test_soundness_property(seed, n1, n2, kind, scale):
    r = np.random.default_rng(seed)
    net = random_bipartite(r, kind, n1, n2, scale=scale)
    ev = sampled_evidence(net, r)
    exact = exact_log_marginal(net, ev).log_marginal
    assert lower_bound(net, ev).log_bound <= exact + 1e-9
