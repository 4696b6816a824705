import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.special import gammaln

from conftest import poisson_instance
from gcgm import kernels
from gcgm.birdsim import GridConfig, build_chain_model, generate
from gcgm.cgm import sample_posterior_baseline
from gcgm.ep import EPOptions, run_ep
from gcgm.gaussian import build_moments, factorize
from gcgm.model import compute_marginals

BACKENDS = sorted(kernels.backends())
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")


def edge_problem(seed, N=12.0, L=3, with_parent_term=False):
    rng = np.random.default_rng(seed)
    d = L - 1
    A = rng.normal(size=(2 * d, 2 * d))
    J = (A @ A.T + 2 * d * np.eye(2 * d)) / N
    prior = np.full(2 * d, N / L)
    h = J @ prior
    ctx = []
    for _ in range(2):
        B = rng.normal(size=(d, d))
        P = (B @ B.T + np.eye(d)) / N
        ctx += [P, P @ rng.uniform(0.5, 1.5, d) * N / L]
    vy = rng.poisson(N / L, L).astype(float)
    py = rng.poisson(N / L, L).astype(float) if with_parent_term else np.zeros(0)
    return dict(J=np.ascontiguousarray(J), h=h, dp=d, cpp=ctx[0], csp=ctx[1], cpv=ctx[2],
                csv=ctx[3], p_y=py, p_lf=gammaln(py + 1), v_y=vy, v_lf=gammaln(vy + 1),
                lam=1.0, eps=1e-6 * N, N=N, prior=prior)


def call_update(kern, pb, joint):
    return kern.edge_update(pb["J"], pb["h"], pb["dp"], pb["cpp"], pb["csp"], pb["cpv"],
                            pb["csv"], pb["p_y"], pb["p_lf"], pb["v_y"], pb["v_lf"], pb["lam"],
                            pb["eps"], pb["N"], pb["prior"], pb["prior"], False, joint, 200,
                            1e-10)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("joint", [False, True])
def test_fused_update_matches_composition(backend, joint):
    kern = kernels.get(backend)
    pb = edge_problem(1, with_parent_term=joint)
    dp = pb["dp"]
    Jc = pb["J"].copy()
    hc = pb["h"].copy()
    Jc[:dp, :dp] += pb["cpp"]
    Jc[dp:, dp:] += pb["cpv"]
    hc[:dp] += pb["csp"]
    hc[dp:] += pb["csv"]
    mode, H, *_ = kern.laplace_edge(Jc, hc, dp, pb["p_y"], pb["p_lf"], pb["v_y"], pb["v_lf"],
                                    pb["lam"], pb["eps"], pb["N"], pb["prior"], pb["prior"],
                                    False, joint, 200, 1e-10)
    msgs = kern.edge_messages(H, mode, dp, pb["cpp"], pb["csp"], pb["cpv"], pb["csv"])
    fused = call_update(kern, pb, joint)
    np.testing.assert_allclose(fused[0], mode, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(fused[1], H, rtol=1e-12, atol=1e-12)
    for a, b in zip(fused[2:6], msgs[:4]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    assert fused[9] == msgs[4]


@pytest.mark.parametrize("backend", BACKENDS)
def test_profile_and_joint_paths_agree(backend):
    kern = kernels.get(backend)
    pb = edge_problem(2)
    prof = call_update(kern, pb, False)
    joint = call_update(kern, pb, True)
    assert prof[7] & kernels.FLAG_PROFILE and not joint[7] & kernels.FLAG_PROFILE
    np.testing.assert_allclose(prof[0], joint[0], rtol=1e-7)
    np.testing.assert_allclose(prof[1], joint[1], rtol=1e-6, atol=1e-9)


@needs_both
@pytest.mark.parametrize("seed", range(4))
def test_edge_kernels_agree_across_backends(seed):
    pb = edge_problem(seed, with_parent_term=seed % 2 == 1)
    a = call_update(kernels.get("cython"), pb, seed % 2 == 1)
    b = call_update(kernels.get("python"), pb, seed % 2 == 1)
    for x, y in zip(a[:6], b[:6]):
        np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-10)
    assert a[9] == b[9]


@needs_both
def test_message_change_agrees():
    rng = np.random.default_rng(0)
    args = [rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=(3, 3)),
            rng.normal(size=3), 1e-3, 1e-2]
    assert kernels.get("cython").message_change(*args) == pytest.approx(
        kernels.get("python").message_change(*args), rel=1e-14)
    empty = [np.zeros((0, 0)), np.zeros(0), np.zeros((0, 0)), np.zeros(0), 1.0, 1.0]
    assert kernels.get("python").message_change(*empty) == 0.0


@needs_both
@pytest.mark.parametrize("seed", [0, 3])
def test_mcmc_chains_are_identical(seed):
    model, obs, _ = poisson_instance(seed, n=4, L=3, N=10)
    a = sample_posterior_baseline(model, obs, 10, burn_in=100, iters=2000, seed=seed,
                                  backend="cython")
    b = sample_posterior_baseline(model, obs, 10, burn_in=100, iters=2000, seed=seed,
                                  backend="python")
    np.testing.assert_array_equal(a.node_means, b.node_means)
    np.testing.assert_array_equal(a.edge_means, b.edge_means)
    assert a.acceptance_rate == b.acceptance_rate


@needs_both
def test_ep_runs_agree_across_backends():
    ds = generate(GridConfig(3, 4, N=900, seed=4))
    model = build_chain_model(ds.config)
    moments = build_moments(model, compute_marginals(model), ds.config.N)
    factored = factorize(moments, model)
    res = [run_ep(model, moments, ds.observations(), options=EPOptions(backend=b),
                  factored=factored) for b in ("cython", "python")]
    np.testing.assert_allclose(res[0].full_means, res[1].full_means, rtol=1e-6, atol=1e-6)
    assert res[0].diagnostics["sweeps"] == res[1].diagnostics["sweeps"]


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get("fortran")


def test_environment_forces_fallback():
    env = dict(os.environ, GCGM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from gcgm import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
