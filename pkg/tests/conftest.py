"""Shared builders and brute-force oracles for the test suite.

The oracles here never call the package's sum-product or dynamic
programs: they enumerate assignments, ordered samples or count tables
directly.
"""
import itertools
import math

import numpy as np
import pytest

from gcgm.cgm import iter_support, log_pmf, observation_loglik
from gcgm.counts import NoiseModel, ObservationSet
from gcgm.model import TreeModel, compute_marginals, sample_population, sufficient_stats


def random_tree_model(rng, n, L, scale=2.0, root=0, root_table=True):
    """Random tree: node k > 0 attaches to a random earlier node, random orientation."""
    edges = []
    for k in range(1, n):
        p = int(rng.integers(k))
        edges.append((p, k) if rng.random() < 0.5 else (k, p))
    pots = [rng.uniform(-scale, scale, (L, L)) for _ in edges]
    rt = rng.uniform(-scale, scale, L) if root_table else None
    return TreeModel(n, L, edges, pots, rt, root=root)


def chain_model(rng, n, L, scale=1.0):
    edges = [(t, t + 1) for t in range(n - 1)]
    pots = [rng.uniform(-scale, scale, (L, L)) for _ in edges]
    return TreeModel(n, L, edges, pots, rng.uniform(-scale, scale, L))


def uniform_model(n, L, edges=None):
    edges = edges if edges is not None else [(t, t + 1) for t in range(n - 1)]
    return TreeModel(n, L, edges, [np.zeros((L, L)) for _ in edges])


def brute_joint(model):
    """All L^n assignments with their normalized probabilities."""
    n, L = model.node_count, model.domain_size
    xs = np.array(list(itertools.product(range(L), repeat=n)), dtype=np.int64)
    logw = np.zeros(len(xs))
    if model.root_log_potential is not None:
        logw += model.root_log_potential[xs[:, model.root]]
    for (u, v), t in zip(model.edges, model.log_potentials):
        logw += t[xs[:, u], xs[:, v]]
    m = logw.max()
    w = np.exp(logw - m)
    Z = w.sum()
    return xs, w / Z, m + math.log(Z)


def brute_marginals(model):
    xs, p, logz = brute_joint(model)
    n, L = model.node_count, model.domain_size
    node = np.zeros((n, L))
    for u in range(n):
        np.add.at(node[u], xs[:, u], p)
    edge = np.zeros((len(model.edges), L, L))
    for e, (u, v) in enumerate(model.edges):
        np.add.at(edge[e], (xs[:, u], xs[:, v]), p)
    return node, edge, logz


def brute_posterior(model, y, N):
    """E[n | y] by summing over every supported count vector."""
    marg = compute_marginals(model)
    logs, nodes, edges = [], [], []
    for cv in iter_support(model, N):
        lp = log_pmf(model, cv, marg)
        for u in range(model.node_count):
            if y.observed[u]:
                lp += float(observation_loglik(y.y[u], cv.node_counts[u], y.noise))
        logs.append(lp)
        nodes.append(cv.node_counts)
        edges.append(cv.edge_counts)
    logs = np.array(logs)
    m = logs.max()
    w = np.exp(logs - m)
    w /= w.sum()
    return (np.tensordot(w, np.array(nodes, dtype=float), axes=1),
            np.tensordot(w, np.array(edges, dtype=float), axes=1))


def poisson_instance(seed, n=4, L=2, N=8, lam=1.0):
    """Random chain, one sampled population and Poisson counts of it."""
    rng = np.random.default_rng(seed)
    model = chain_model(rng, n, L)
    pop = sample_population(model, N, rng)
    counts = sufficient_stats(pop, model)
    y = rng.poisson(lam * counts.node_counts)
    return model, ObservationSet.full(y, NoiseModel.poisson(lam)), counts


def relative_l1(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.abs(a - b).sum() / np.abs(b).sum())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
