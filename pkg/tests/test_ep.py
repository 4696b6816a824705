import numpy as np
import pytest

from conftest import poisson_instance, random_tree_model, relative_l1, uniform_model
from gcgm.cgm import enumerate_posterior
from gcgm.counts import NoiseModel, ObservationSet
from gcgm.ep import (
    EdgePotential,
    EPMessage,
    EPOptions,
    _evidence,
    _poisson_extended,
    edge_potential,
    ep_update_edge,
    laplace_project,
    poisson_loglik,
    run_ep,
)
from gcgm.errors import DomainError
from gcgm.gaussian import build_moments, condition_exact, factorize
from gcgm.model import TreeModel, compute_marginals, sample_population, sufficient_stats
from test_cgm import REF_NODE, reference_chain


def setup(model, N):
    mo = build_moments(model, compute_marginals(model), N)
    return mo, factorize(mo, model)


def noisy_counts(model, N, rng, lam=1.0):
    c = sufficient_stats(sample_population(model, N, rng), model)
    return rng.poisson(lam * c.node_counts)


# poisson_loglik --------------------------------------------------------------

def test_poisson_at_zero_count():
    v, g, h = poisson_loglik([0], [2.0], 1.0)
    assert v == pytest.approx(-2.0)
    np.testing.assert_allclose(g, [-1.0])
    np.testing.assert_allclose(h, [0.0])


def test_poisson_maximized_at_observation():
    vals = [poisson_loglik([3], [z], 1.0)[0] for z in (2.5, 2.9, 3.0, 3.1, 3.5)]
    assert int(np.argmax(vals)) == 2
    assert poisson_loglik([3], [3.0], 1.0)[1][0] == pytest.approx(0.0)


@pytest.mark.parametrize("lam", [0.5, 1.0, 3.0])
def test_poisson_derivatives_match_differences(rng, lam):
    y = rng.integers(0, 10, size=5).astype(float)
    z = rng.uniform(1.0, 8.0, size=5)
    _, g, h = poisson_loglik(y, z, lam)
    step = 1e-5
    for i in range(5):
        e = np.zeros(5)
        e[i] = step
        fd = (poisson_loglik(y, z + e, lam)[0] - poisson_loglik(y, z - e, lam)[0]) / (2 * step)
        assert fd == pytest.approx(g[i], rel=1e-5, abs=1e-8)
        fd2 = (poisson_loglik(y, z + e, lam)[1][i] - poisson_loglik(y, z - e, lam)[1][i]) / (2 * step)
        assert fd2 == pytest.approx(h[i], rel=1e-5, abs=1e-8)


def test_poisson_domain_error():
    with pytest.raises(DomainError):
        poisson_loglik([2.0], [0.0], 1.0)
    poisson_loglik([0.0], [0.0], 1.0)  # y = 0 needs no positive rate


def test_extension_is_smooth_at_threshold():
    y = np.array([4.0])
    eps = 0.5
    for z in (eps - 1e-9, eps + 1e-9):
        v, g, h, _ = _poisson_extended(y, np.array([z]), 1.0, eps)
        v0, g0, h0 = poisson_loglik(y, [eps], 1.0)
        assert v == pytest.approx(v0, abs=1e-7)
        assert g[0] == pytest.approx(g0[0], abs=1e-6)
    v, g, h, clamped = _poisson_extended(y, np.array([-1.0]), 1.0, eps)
    assert clamped == 1 and np.isfinite(v) and h[0] < 0


# edge_potential ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_potential_gradient_matches_differences(seed):
    rng = np.random.default_rng(seed)
    m = random_tree_model(rng, 4, 3)
    N = 30
    mo, f = setup(m, N)
    y = ObservationSet.full(noisy_counts(m, N, rng), NoiseModel.poisson(1.0))
    for v in f.structure.order[1:]:
        pot = edge_potential(f, v, y)
        p = f.structure.parent[v]
        x = np.concatenate([mo.node_mean[p], mo.node_mean[v]])
        # interior point: every lifted entry stays positive
        while True:
            trial = x + rng.normal(scale=0.5, size=4)
            if min(trial[:2].min(), trial[2:].min(), N - trial[:2].sum(), N - trial[2:].sum()) > 0.5:
                x = trial
                break
        g = pot.gradient(x)
        step = 1e-5
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = step
            fd = (pot(x + e) - pot(x - e)) / (2 * step)
            assert fd == pytest.approx(g[i], rel=1e-4, abs=1e-6)


def test_root_edge_carries_both_terms():
    rng = np.random.default_rng(0)
    m = uniform_model(3, 2)
    mo, f = setup(m, 10)
    y = ObservationSet.full(noisy_counts(m, 10, rng), NoiseModel.poisson(1.0))
    first = f.structure.children[f.structure.root][0]
    assert edge_potential(f, first, y).joint_required
    other = [v for v in f.structure.order[1:] if v != first][0]
    assert not edge_potential(f, other, y).joint_required


def test_poisson_term_value():
    # single observed cell with y = 0 contributes -lam * z
    m = uniform_model(2, 2)
    mo, f = setup(m, 4)
    y = ObservationSet(np.array([[0.0, 0.0], [0.0, 0.0]]), np.array([False, True]),
                       NoiseModel.poisson(1.0))
    pot = edge_potential(f, 1, y)
    empty = ObservationSet.empty(2, 2)
    base = edge_potential(f, 1, empty)
    x = np.array([2.0, 2.0])
    # lifted child vector is (2, 2); Poisson log pmf at zero is -(2 + 2)
    assert pot(x) - base(x) == pytest.approx(-4.0)


# laplace_project ---------------------------------------------------------------

def test_laplace_is_exact_for_gaussian_terms(rng):
    m = random_tree_model(rng, 3, 3)
    N = 20
    mo, f = setup(m, N)
    y = ObservationSet.full(np.abs(noisy_counts(m, N, rng) + 0.3), NoiseModel.gaussian(2.0))
    v = f.structure.children[f.structure.root][0]
    pot = edge_potential(f, v, y)
    ctx = EPMessage(np.eye(2) * 0.1, np.ones(2))
    res = laplace_project(pot, ctx, ctx, N)
    J = pot.J.copy()
    J[:2, :2] += ctx.prec
    J[2:, 2:] += ctx.prec
    h = pot.h + np.concatenate([ctx.shift, ctx.shift])
    np.testing.assert_allclose(res.mode, np.linalg.solve(J, h), rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(res.hessian, J, rtol=1e-8, atol=1e-8)


def test_laplace_without_evidence_returns_prior_mode(rng):
    m = random_tree_model(rng, 3, 3)
    mo, f = setup(m, 15)
    v = f.structure.children[f.structure.root][0]
    pot = edge_potential(f, v, ObservationSet.empty(3, 3))
    res = laplace_project(pot, EPMessage.zero(2), EPMessage.zero(2), 15)
    prior = np.concatenate([mo.node_mean[f.structure.root], mo.node_mean[v]])
    np.testing.assert_allclose(res.mode, prior, atol=1e-8)
    assert res.converged


def test_laplace_poisson_mode_has_zero_gradient():
    model, y, _ = poisson_instance(3, n=3, N=12)
    mo, f = setup(model, 12)
    for v in f.structure.order[1:]:
        pot = edge_potential(f, v, y)
        p = f.structure.parent[v]
        ctx = EPMessage(np.linalg.inv(mo.node_cov[p]), np.linalg.solve(mo.node_cov[p], mo.node_mean[p]))
        res = laplace_project(pot, ctx, EPMessage.zero(1), 12)
        assert res.converged and res.monotone
        g = pot.gradient(res.mode)
        g[:1] += -ctx.prec @ res.mode[:1] + ctx.shift
        assert np.abs(g).max() < 1e-6
        assert np.all(np.linalg.eigvalsh(res.hessian) > 0)


# run_ep ----------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_gaussian_noise_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    L = int(rng.integers(2, 5))
    m = random_tree_model(rng, n, L)
    N = 40
    mo, f = setup(m, N)
    observed = rng.random(n) < 0.7
    y = ObservationSet(noisy_counts(m, N, rng).astype(float), observed,
                       NoiseModel.gaussian(float(rng.choice([0.5, 5.0]))))
    if not observed.any():
        observed[0] = True
    res = run_ep(m, mo, y)
    ref = condition_exact(f, y)
    assert res.converged and res.sweeps <= 3
    for u in range(n):
        np.testing.assert_allclose(res.means[u], ref.means[u], rtol=1e-6, atol=1e-6 * N)
        np.testing.assert_allclose(res.covs[u], ref.covs[u], rtol=1e-5, atol=1e-6 * N)


def test_exact_noise_returns_observations(rng):
    m = random_tree_model(rng, 4, 3)
    c = sufficient_stats(sample_population(m, 9, rng), m)
    mo, _ = setup(m, 9)
    res = run_ep(m, mo, ObservationSet.full(c.node_counts, NoiseModel.exact()))
    np.testing.assert_allclose(res.full_means, c.node_counts, atol=1e-9)
    for cov in res.covs:
        np.testing.assert_allclose(cov, 0.0)


def test_no_observations_return_prior(rng):
    m = random_tree_model(rng, 4, 3)
    mo, _ = setup(m, 9)
    res = run_ep(m, mo, ObservationSet.empty(4, 3, NoiseModel.poisson(1.0)))
    np.testing.assert_allclose(res.full_means, 9 * compute_marginals(m).node_marginals, atol=1e-9)


def test_single_node_tree():
    m = TreeModel(1, 3, [], [], [0.0, 0.5, -0.5])
    mo, _ = setup(m, 20)
    y = ObservationSet.full(np.array([[3.0, 12.0, 5.0]]), NoiseModel.poisson(1.0))
    res = run_ep(m, mo, y)
    assert res.full_means.sum() == pytest.approx(20.0)
    assert np.all(np.isfinite(res.covs[0]))


def test_reference_chain_close_to_oracle():
    m, y = reference_chain()
    mo, _ = setup(m, 5)
    res = run_ep(m, mo, y)
    assert res.converged
    assert relative_l1(res.full_means, REF_NODE) < 0.10


def test_damping_reaches_same_fixed_point():
    m, y = reference_chain()
    mo, _ = setup(m, 5)
    a = run_ep(m, mo, y, options=EPOptions(tol=1e-10, max_sweeps=200))
    b = run_ep(m, mo, y, options=EPOptions(tol=1e-10, max_sweeps=200, damping=0.5))
    assert a.converged and b.converged
    np.testing.assert_allclose(a.full_means, b.full_means, atol=1e-5)


def test_update_is_idempotent_at_convergence():
    model, y, _ = poisson_instance(1, N=10)
    mo, f = setup(model, 10)
    res = run_ep(model, mo, y, options=EPOptions(tol=1e-10, max_sweeps=100), factored=f)
    assert res.converged
    ev = _evidence(f, y)
    first = f.structure.children[f.structure.root][0]
    for v in f.structure.order[1:]:
        pot = EdgePotential(f, v, ev, v == first)
        assert ep_update_edge(res.state, f, pot, 10) < 1e-8


def test_state_relabeling_permutes_posterior():
    model, y, _ = poisson_instance(4, n=4, L=3, N=15)
    perm = np.array([2, 0, 1])
    pots = [t[np.ix_(perm, perm)] for t in model.log_potentials]
    relabeled = TreeModel(4, 3, model.edges, pots, model.root_log_potential[perm])
    y2 = ObservationSet.full(y.y[:, perm], y.noise)
    opts = EPOptions(tol=1e-10, max_sweeps=100)
    a = run_ep(model, setup(model, 15)[0], y, options=opts)
    b = run_ep(relabeled, setup(relabeled, 15)[0], y2, options=opts)
    np.testing.assert_allclose(b.full_means, a.full_means[:, perm], atol=1e-6)


@pytest.mark.parametrize("seed", range(30))
def test_messages_stay_finite(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 7))
    L = int(rng.integers(2, 5))
    m = random_tree_model(rng, n, L, scale=float(rng.uniform(0.5, 4.0)))
    N = int(rng.integers(5, 200))
    mo, _ = setup(m, N)
    lam = float(rng.uniform(0.2, 3.0))
    y = ObservationSet(noisy_counts(m, N, rng, lam).astype(float), rng.random(n) < 0.8,
                       NoiseModel.poisson(lam))
    res = run_ep(m, mo, y, options=EPOptions(max_sweeps=20))
    assert np.all(np.isfinite(res.full_means))
    if res.state is not None:
        for msg in list(res.state.to_parent.values()) + list(res.state.to_child.values()):
            assert np.all(np.isfinite(msg.prec)) and np.all(np.isfinite(msg.shift))
            if msg.prec.size:
                assert np.linalg.eigvalsh(msg.prec).min() >= -1e-10 * max(1.0, np.abs(msg.prec).max())


def test_poisson_posterior_tracks_oracle():
    errs = []
    for seed in range(5):
        model, y, _ = poisson_instance(seed, N=8)
        mo, _ = setup(model, 8)
        post = enumerate_posterior(model, y, 8)
        errs.append(relative_l1(run_ep(model, mo, y).full_means, post.node_means))
    assert np.mean(errs) < 0.25
