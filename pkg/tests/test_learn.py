import numpy as np
import pytest

from conftest import relative_l1
from gcgm.birdsim import GridConfig, build_chain_model, generate
from gcgm.cgm import enumerate_posterior
from gcgm.counts import NoiseModel, ObservationSet
from gcgm.errors import NonFinite
from gcgm.learn import (
    EMConfig,
    _feature_stack,
    e_step,
    floor_weights,
    m_step,
    mstep_objective,
    relative_error,
    run_em,
)
from gcgm.model import compute_marginals

W_TRUE = (1.0, 2.0, 2.0, 2.0)


def expected_edges(cfg):
    mg = compute_marginals(build_chain_model(cfg))
    return cfg.N * mg.edge_marginals, cfg.N * mg.node_marginals


# m_step ------------------------------------------------------------------------

def test_expected_counts_are_a_fixed_point():
    cfg = GridConfig(3, 5, w=W_TRUE, N=1000, seed=1)
    edges, _ = expected_edges(cfg)
    _, g, _ = mstep_objective(np.array(W_TRUE), edges, _feature_stack(cfg))
    assert np.abs(g).max() < 1e-6
    w, _ = m_step(edges, cfg, w0=(0.2, 0.4, 0.4, 0.4))
    np.testing.assert_allclose(w, W_TRUE, atol=1e-5)


def test_self_transition_mass_drives_stay_weight_up():
    cfg = GridConfig(2, 3, w=(0, 0, 0, 0), N=100, seed=0)
    weights = np.zeros((2, 4, 4))
    for t in range(2):
        weights[t] = np.diag(np.full(4, 25.0)) + 1e-3
    trace = []
    w, _ = m_step(weights, cfg, w0=(0, 0, 0, 0), trace=trace, max_iters=50)
    assert w[3] > 5.0
    assert all(b >= a for a, b in zip(trace, trace[1:]))


def test_scaling_weights_keeps_argmax():
    cfg = GridConfig(2, 4, w=(0.5, 1.0, 1.5, 1.0), N=50, seed=3)
    edges, _ = expected_edges(cfg.with_w((0.8, 1.2, 0.3, 2.0)))
    w1, _ = m_step(edges, cfg)
    w2, _ = m_step(2 * edges, cfg)
    np.testing.assert_allclose(w1, w2, atol=1e-6)


def test_objective_gradient_and_hessian_match_differences():
    rng = np.random.default_rng(0)
    cfg = GridConfig(2, 3, seed=2)
    feats = _feature_stack(cfg)
    weights = rng.uniform(0, 5, (2, 4, 4))
    w = rng.normal(size=4)
    f, g, H = mstep_objective(w, weights, feats)
    step = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = step
        fp, gp, _ = mstep_objective(w + e, weights, feats)
        fm, gm, _ = mstep_objective(w - e, weights, feats)
        assert (fp - fm) / (2 * step) == pytest.approx(g[k], rel=1e-6, abs=1e-6)
        np.testing.assert_allclose((gp - gm) / (2 * step), H[k], rtol=1e-5, atol=1e-5)
    assert np.all(np.linalg.eigvalsh(H) <= 1e-9)


def test_supervised_fit_recovers_truth():
    d = generate(GridConfig(2, 6, w=W_TRUE, N=20000, seed=4))
    w, _ = m_step(d.edge_counts, d.config, w0=(0, 0, 0, 0))
    assert relative_error(w, W_TRUE) < 0.1


def test_floor_weights():
    W = np.array([[[3.0, -1.0], [1.0, 1.0]]])
    out = floor_weights(W)
    np.testing.assert_allclose(out.sum(axis=-1), W.sum(axis=-1))
    assert np.all(out >= 0)
    np.testing.assert_allclose(out[0, 1], [1.0, 1.0])
    with pytest.raises(NonFinite):
        floor_weights(np.array([[np.nan, 1.0]]))


# e_step ------------------------------------------------------------------------

def test_exact_observations_are_reproduced():
    d = generate(GridConfig(2, 4, N=40, seed=5))
    es = e_step(W_TRUE, d, observations=ObservationSet.full(d.node_counts, NoiseModel.exact()))
    np.testing.assert_allclose(es.node_means, d.node_counts, atol=1e-8)


def test_uninformative_observations_give_prior():
    cfg = GridConfig(2, 4, w=W_TRUE, N=40, seed=5)
    d = generate(cfg)
    y = ObservationSet.full(np.ones_like(d.y, dtype=float), NoiseModel.gaussian(1e14))
    es = e_step(W_TRUE, d, observations=y)
    edges, nodes = expected_edges(d.config)
    np.testing.assert_allclose(es.node_means, nodes, atol=1e-6)
    np.testing.assert_allclose(es.edge_means, edges, atol=1e-6)


def test_edge_means_are_consistent_with_node_means():
    d = generate(GridConfig(3, 5, N=500, seed=6))
    es = e_step(W_TRUE, d)
    for t in range(4):
        np.testing.assert_allclose(es.edge_means[t].sum(axis=1), es.node_means[t], atol=1e-6 * 500)
        np.testing.assert_allclose(es.edge_means[t].sum(axis=0), es.node_means[t + 1],
                                   atol=1e-6 * 500)


def test_e_step_approaches_oracle_with_population_size():
    errs = {}
    for N in (4, 8):
        vals = []
        for seed in range(3):
            d = generate(GridConfig(2, 3, N=N, seed=seed))
            es = e_step(d.config.w, d)
            post = enumerate_posterior(build_chain_model(d.config), d.observations(), N)
            vals.append(relative_l1(es.edge_means, post.edge_means))
        errs[N] = np.mean(vals)
    assert errs[8] < errs[4]
    assert errs[8] < 0.2


# run_em ------------------------------------------------------------------------

def test_truth_is_a_fixed_point_of_em():
    cfg = GridConfig(2, 4, w=W_TRUE, N=200, seed=7)
    d = generate(cfg)
    _, nodes = expected_edges(d.config)
    y = ObservationSet.full(nodes, NoiseModel.exact())
    trace = run_em(d, EMConfig(init_w=W_TRUE, max_em_iters=3, true_w=W_TRUE), observations=y)
    assert len(trace) == 2
    assert np.max(np.abs(np.array(trace.w[1]) - W_TRUE)) < 1e-4


def test_trace_length_is_bounded():
    d = generate(GridConfig(2, 4, N=100, seed=8))
    trace = run_em(d, EMConfig(max_em_iters=2, tol=0.0, true_w=W_TRUE))
    assert len(trace) == 3
    rows = list(trace.rows())
    assert len(rows[0]) == 8
    assert rows[0][1:5] == (0.2, 0.4, 0.4, 0.4)
    assert trace.rel_error[0] == pytest.approx(relative_error((0.2, 0.4, 0.4, 0.4), W_TRUE))


def test_em_improves_on_initial_error():
    d = generate(GridConfig(2, 4, w=W_TRUE, N=1000, seed=9))
    trace = run_em(d, EMConfig(max_em_iters=5, true_w=W_TRUE))
    assert trace.rel_error[-1] < trace.rel_error[0]
