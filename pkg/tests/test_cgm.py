import itertools
import math
from collections import Counter, defaultdict

import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import brute_posterior, chain_model, poisson_instance, random_tree_model, uniform_model
from gcgm.cgm import (
    check_support,
    compositions,
    enumerate_posterior,
    iter_support,
    log_base_measure,
    log_pmf,
    log_pmf_reparam,
    observation_loglik,
    sample_posterior_baseline,
    support_size,
)
from gcgm.counts import CountVector, NoiseModel, ObservationSet
from gcgm.errors import TooLarge, UnsupportedCount
from gcgm.model import (
    Population,
    TreeModel,
    compute_marginals,
    log_prob_individual,
    sample_population,
    sufficient_stats,
)


def reference_chain():
    th = [np.array([[0.6, -0.3], [-0.2, 0.4]]), np.array([[0.1, 0.5], [-0.4, 0.2]])]
    m = TreeModel(3, 2, [(0, 1), (1, 2)], th, [0.3, -0.3])
    y = ObservationSet.full(np.array([[4, 2], [1, 3], [2, 2]]), NoiseModel.poisson(1.0))
    return m, y


# Frozen from brute_posterior (a direct sum over iter_support).
REF_NODE = np.array([
    [3.2083994283874624, 1.7916005716125392],
    [2.4362229465240164, 2.5637770534759845],
    [2.195295975071217, 2.8047040249287836],
])
REF_EDGE = np.array([
    [[1.9932173166968299, 1.215182111690631], [0.4430056298271852, 1.3485949417853538]],
    [[1.1352980212093824, 1.3009249253146329], [1.059997953861834, 1.5037790996141507]],
])


# check_support ---------------------------------------------------------------

def test_sampled_counts_are_supported(rng):
    m = random_tree_model(rng, 5, 3)
    assert check_support(sufficient_stats(sample_population(m, 17, seed=1), m), m)


def test_broken_total_is_unsupported(rng):
    m = random_tree_model(rng, 3, 2)
    c = sufficient_stats(sample_population(m, 5, seed=1), m)
    node = c.node_counts.copy()
    node[0, 0] -= 1 if node[0, 0] > 0 else -1
    assert not check_support(CountVector(c.N, node, c.edge_counts), m)


def test_broken_row_sum_is_unsupported():
    m = uniform_model(2, 2)
    node = np.array([[1, 1], [1, 1]])
    edge = np.array([[[2, 0], [0, 0]]])
    assert not check_support(CountVector(2, node, edge), m)
    with pytest.raises(UnsupportedCount):
        log_pmf(m, CountVector(2, node, edge))


# log_pmf ----------------------------------------------------------------------

def test_uniform_diagonal_is_one_eighth():
    m = uniform_model(2, 2)
    n = CountVector(2, np.array([[1, 1], [1, 1]]), np.array([[[1, 0], [0, 1]]]))
    assert log_pmf(m, n) == pytest.approx(math.log(1 / 8), abs=1e-12)
    assert log_pmf_reparam(m, n) == pytest.approx(math.log(1 / 8), abs=1e-12)


def test_single_sample_reduces_to_individual(rng):
    m = random_tree_model(rng, 4, 3)
    for seed in range(5):
        pop = sample_population(m, 1, seed=seed)
        c = sufficient_stats(pop, m)
        lp = log_prob_individual(m, pop.trajectories[0])
        assert log_pmf(m, c) == pytest.approx(lp, abs=1e-10)
        assert log_pmf_reparam(m, c) == pytest.approx(lp, abs=1e-10)


@pytest.mark.parametrize("N", [1, 2, 3, 4])
def test_chain_pmf_normalizes(rng, N):
    m = chain_model(rng, 3, 2)
    mg = compute_marginals(m)
    lps = [log_pmf(m, c, mg) for c in iter_support(m, N)]
    assert math.exp(logsumexp(lps)) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_reparam_identity_on_full_support(seed):
    rng = np.random.default_rng(seed)
    m = random_tree_model(rng, int(rng.integers(2, 5)), int(rng.integers(2, 4)),
                          root=0)
    mg = compute_marginals(m)
    N = 3 if m.domain_size == 2 else 2
    diffs = [abs(log_pmf(m, c, mg) - log_pmf_reparam(m, c, mg)) for c in iter_support(m, N)]
    assert max(diffs) < 1e-9


def test_mean_count_is_N_times_marginal(rng):
    m = random_tree_model(rng, 3, 2)
    mg = compute_marginals(m)
    N = 4
    lps, nodes = [], []
    for c in iter_support(m, N):
        lps.append(log_pmf(m, c, mg))
        nodes.append(c.node_counts)
    w = np.exp(np.array(lps))
    np.testing.assert_allclose(np.tensordot(w, np.array(nodes), axes=1),
                               N * mg.node_marginals, atol=1e-10)


# base measure ----------------------------------------------------------------

@pytest.mark.parametrize("N", [1, 2, 3])
def test_base_measure_counts_ordered_samples(N):
    m = uniform_model(2, 2)
    tally = Counter()
    for flat in itertools.product(range(2), repeat=2 * N):
        traj = np.array(flat).reshape(N, 2)
        c = sufficient_stats(Population(traj), m)
        tally[c.edge_counts.tobytes()] += 1
    seen = 0
    for c in iter_support(m, N):
        key = c.edge_counts.astype(np.int64).tobytes()
        assert round(math.exp(log_base_measure(m, c))) == tally[key]
        assert math.exp(log_base_measure(m, c)) == pytest.approx(tally[key], rel=1e-12)
        seen += 1
    assert seen == len(tally)


def test_star_base_measure_uses_degree_minus_one():
    # center node 0 has degree 3; brute count of ordered samples
    m = uniform_model(4, 2, edges=[(0, 1), (0, 2), (0, 3)])
    N = 2
    tally = Counter()
    for flat in itertools.product(range(2), repeat=4 * N):
        c = sufficient_stats(Population(np.array(flat).reshape(N, 4)), m)
        tally[c.edge_counts.tobytes()] += 1
    for c in iter_support(m, N):
        assert math.exp(log_base_measure(m, c)) == pytest.approx(
            tally[c.edge_counts.astype(np.int64).tobytes()], rel=1e-12)


# support enumeration -----------------------------------------------------------

def test_compositions_small():
    assert compositions(2, 2).tolist() == [[0, 2], [1, 1], [2, 0]]
    assert len(compositions(4, 3)) == math.comb(6, 2)


@pytest.mark.parametrize("seed", range(4))
def test_support_size_matches_iteration(seed):
    rng = np.random.default_rng(seed)
    m = random_tree_model(rng, 4, 2, root=int(rng.integers(4)))
    items = list(iter_support(m, 3))
    assert support_size(m, 3) == len(items)
    assert all(check_support(c, m) for c in items)
    keys = {(c.node_counts.tobytes(), c.edge_counts.tobytes()) for c in items}
    assert len(keys) == len(items)


def test_conditional_independence_given_separator(rng):
    m = chain_model(rng, 3, 2)
    mg = compute_marginals(m)
    joint = defaultdict(float)
    for c in iter_support(m, 3):
        key = (c.node_counts[1].tobytes(), c.edge_counts[0].tobytes(), c.edge_counts[1].tobytes())
        joint[key] += math.exp(log_pmf(m, c, mg))
    pS, pAS, pBS = defaultdict(float), defaultdict(float), defaultdict(float)
    for (s, a, b), p in joint.items():
        pS[s] += p
        pAS[s, a] += p
        pBS[s, b] += p
    for (s, a, b), p in joint.items():
        assert p / pS[s] == pytest.approx(pAS[s, a] / pS[s] * pBS[s, b] / pS[s], abs=1e-9)


# observation likelihood ------------------------------------------------------

def test_observation_loglik_cases():
    assert observation_loglik([1, 2], [1, 2], NoiseModel.exact()) == 0.0
    assert observation_loglik([1, 2], [2, 1], NoiseModel.exact()) == -np.inf
    assert observation_loglik([1, 0], [0, 3], NoiseModel.poisson(1.0)) == -np.inf
    assert observation_loglik([0, 0], [0, 3], NoiseModel.poisson(1.0)) == pytest.approx(-3.0)
    v = observation_loglik([1.0], [0.0], NoiseModel.gaussian(2.0))
    assert v == pytest.approx(-0.25 - 0.5 * math.log(4 * math.pi))


# enumerate_posterior ---------------------------------------------------------

def test_reference_chain_posterior():
    m, y = reference_chain()
    post = enumerate_posterior(m, y, 5)
    np.testing.assert_allclose(post.node_means, REF_NODE, rtol=1e-11)
    np.testing.assert_allclose(post.edge_means, REF_EDGE, rtol=1e-11)


def test_reference_values_match_brute_sum():
    m, y = reference_chain()
    node, edge = brute_posterior(m, y, 5)
    np.testing.assert_allclose(node, REF_NODE, rtol=1e-11)
    np.testing.assert_allclose(edge, REF_EDGE, rtol=1e-11)


def test_log_evidence_matches_brute_sum():
    m, y = reference_chain()
    mg = compute_marginals(m)
    terms = []
    for c in iter_support(m, 5):
        lp = log_pmf(m, c, mg)
        lp += sum(float(observation_loglik(y.y[u], c.node_counts[u], y.noise)) for u in range(3))
        terms.append(lp)
    assert enumerate_posterior(m, y, 5).log_evidence == pytest.approx(logsumexp(terms), abs=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_posterior_matches_brute_on_random_trees(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    m = random_tree_model(rng, n, 2, root=int(rng.integers(n)))
    N = 3
    counts = sufficient_stats(sample_population(m, N, rng), m)
    noise = [NoiseModel.poisson(1.5), NoiseModel.gaussian(1.0)][seed % 2]
    observed = rng.random(n) < 0.7
    y = ObservationSet(rng.poisson(counts.node_counts).astype(float), observed, noise)
    node, edge = brute_posterior(m, y, N)
    post = enumerate_posterior(m, y, N)
    np.testing.assert_allclose(post.node_means, node, atol=1e-10)
    np.testing.assert_allclose(post.edge_means, edge, atol=1e-10)


def test_exact_observation_is_reproduced(rng):
    m = random_tree_model(rng, 4, 2)
    c = sufficient_stats(sample_population(m, 4, seed=0), m)
    post = enumerate_posterior(m, ObservationSet.full(c.node_counts, NoiseModel.exact()), 4)
    np.testing.assert_allclose(post.node_means, c.node_counts, atol=1e-12)


def test_no_observations_give_prior_mean(rng):
    m = random_tree_model(rng, 4, 3)
    post = enumerate_posterior(m, ObservationSet.empty(4, 3), 4)
    np.testing.assert_allclose(post.node_means, 4 * compute_marginals(m).node_marginals,
                               atol=1e-10)
    assert post.log_evidence == pytest.approx(0.0, abs=1e-10)


def test_impossible_observation_raises():
    m = uniform_model(2, 2)
    y = ObservationSet.full(np.array([[3, 0], [0, 3]]), NoiseModel.exact())
    with pytest.raises(UnsupportedCount):
        enumerate_posterior(m, y, 2)


def test_guard_refuses_large_problems():
    m = uniform_model(6, 4)
    with pytest.raises(TooLarge):
        enumerate_posterior(m, ObservationSet.empty(6, 4), 40, guard=10_000)


# sample_posterior_baseline ---------------------------------------------------

def test_zero_iterations_return_initial_counts(rng):
    m = random_tree_model(rng, 3, 2)
    pop = sample_population(m, 6, seed=4)
    res = sample_posterior_baseline(m, ObservationSet.empty(3, 2), 6, 0, 0, seed=0, init=pop)
    c = sufficient_stats(pop, m)
    np.testing.assert_array_equal(res.node_means, c.node_counts)
    np.testing.assert_array_equal(res.edge_means, c.edge_counts)


def test_baseline_agrees_with_oracle():
    m, y = reference_chain()
    post = enumerate_posterior(m, y, 5)
    res = sample_posterior_baseline(m, y, 5, burn_in=500, iters=20000, seed=3)
    z_node = np.abs(res.node_means - post.node_means) / np.maximum(res.node_se, 1e-12)
    z_edge = np.abs(res.edge_means - post.edge_means) / np.maximum(res.edge_se, 1e-12)
    assert z_node.max() < 3.0 and z_edge.max() < 3.0
    assert 0 < res.acceptance_rate <= 1


def test_baseline_is_seed_deterministic():
    model, y, _ = poisson_instance(2, N=6)
    a = sample_posterior_baseline(model, y, 6, 50, 300, seed=9)
    b = sample_posterior_baseline(model, y, 6, 50, 300, seed=9)
    np.testing.assert_array_equal(a.node_means, b.node_means)
    assert a.final_counts == b.final_counts


def test_baseline_keeps_exact_observations(rng):
    m = random_tree_model(rng, 4, 3)
    c = sufficient_stats(sample_population(m, 7, seed=2), m)
    y = ObservationSet.full(c.node_counts, NoiseModel.exact())
    res = sample_posterior_baseline(m, y, 7, 10, 200, seed=1)
    np.testing.assert_allclose(res.node_means, c.node_counts)
    assert check_support(res.final_counts, m)
