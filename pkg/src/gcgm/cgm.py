"""Exact CGM distribution over tree sufficient statistics and small-instance references.

For a tree the cliques are the edges and the separators are the internal
nodes; a node of degree ``d`` appears ``d - 1`` times as a separator.  The
same exponent also covers an isolated single node (``d = 0``), where the node
itself is the only clique.
"""
from __future__ import annotations

import itertools
import math
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from . import kernels
from ._treebp import tree_sum_product
from .counts import CountVector
from .errors import TooLarge, UnsupportedCount, ZeroMarginal
from .model import (
    Population,
    _conditionals,
    compute_marginals,
    sample_population,
    sufficient_stats,
)

__all__ = [
    "separator_multiplicity",
    "check_support",
    "log_base_measure",
    "log_pmf",
    "log_pmf_reparam",
    "compositions",
    "iter_support",
    "support_size",
    "observation_loglik",
    "Posterior",
    "enumerate_posterior",
    "BaselineResult",
    "sample_posterior_baseline",
    "DEFAULT_GUARD",
]

DEFAULT_GUARD = 10**7


def separator_multiplicity(model):
    """nu(u) = degree(u) - 1 for every node."""
    return np.array(model.structure.degree) - 1


def check_support(n, model):
    """True iff the counts satisfy every hard constraint (exact integer arithmetic)."""
    node = np.asarray(n.node_counts)
    edge = np.asarray(n.edge_counts)
    L = model.domain_size
    if node.shape != (model.node_count, L) or edge.shape != (len(model.edges), L, L):
        return False
    if not (np.issubdtype(node.dtype, np.integer) and np.issubdtype(edge.dtype, np.integer)):
        if not (np.all(node == np.round(node)) and np.all(edge == np.round(edge))):
            return False
    if np.any(node < 0) or np.any(edge < 0):
        return False
    if np.any(node.sum(axis=1) != n.N):
        return False
    for e, (u, v) in enumerate(model.edges):
        t = edge[e]
        if t.sum() != n.N:
            return False
        if np.any(t.sum(axis=1) != node[u]) or np.any(t.sum(axis=0) != node[v]):
            return False
    return True


def log_base_measure(model, n):
    """log h(n): log of the number of ordered samples with statistics ``n``."""
    nu = separator_multiplicity(model)
    out = gammaln(n.N + 1)
    out += float(np.sum(nu[:, None] * gammaln(np.asarray(n.node_counts) + 1.0)))
    out -= float(np.sum(gammaln(np.asarray(n.edge_counts) + 1.0)))
    return float(out)


def _dot_masked(theta, counts):
    """sum(theta * counts) treating 0 * (-inf) as 0."""
    counts = np.asarray(counts, dtype=float)
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.where(counts > 0, theta * counts, 0.0)))


def log_pmf(model, n, marginals=None):
    """log p(n; theta) = log h(n) + sum theta . n - N Q(theta)."""
    if not check_support(n, model):
        raise UnsupportedCount("count vector violates the consistency constraints")
    if marginals is None:
        marginals = compute_marginals(model)
    log_f = _dot_masked(model.root_table, n.node_counts[model.root])
    for e, t in enumerate(model.log_potentials):
        log_f += _dot_masked(t, n.edge_counts[e])
    log_f -= n.N * marginals.log_partition
    return log_base_measure(model, n) + log_f


def _xlogy_checked(counts, probs, what):
    counts = np.asarray(counts, dtype=float)
    if np.any((probs <= 0) & (counts > 0)):
        raise ZeroMarginal(f"{what} has zero probability but a positive count")
    with np.errstate(divide="ignore"):
        return float(np.sum(np.where(counts > 0, counts * np.log(probs), 0.0)))


def log_pmf_reparam(model, n, marginals=None):
    """Same distribution written with clique and separator marginals."""
    if not check_support(n, model):
        raise UnsupportedCount("count vector violates the consistency constraints")
    if marginals is None:
        marginals = compute_marginals(model)
    nu = separator_multiplicity(model)
    out = log_base_measure(model, n)
    if not model.edges:
        return out + _xlogy_checked(n.node_counts[0], marginals.node_marginals[0], "node 0")
    for e in range(len(model.edges)):
        out += _xlogy_checked(n.edge_counts[e], marginals.edge_marginals[e], f"edge {e}")
    for u in range(model.node_count):
        if nu[u] > 0:
            out -= nu[u] * _xlogy_checked(
                n.node_counts[u], marginals.node_marginals[u], f"node {u}"
            )
    return out


def compositions(total, parts):
    """All nonnegative integer vectors of length ``parts`` summing to ``total``.

    Rows are in increasing order of the first entry.
    """
    rows = []
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        row = []
        for b in bars:
            row.append(b - prev - 1)
            prev = b
        row.append(total + parts - 2 - prev)
        rows.append(row)
    return np.array(rows, dtype=np.int64).reshape(-1, parts)


def _tables_with_rows(rows):
    """All L x L nonnegative integer tables with the given row sums."""
    L = len(rows)
    per_row = [compositions(int(r), L) for r in rows]
    grids = np.meshgrid(*[np.arange(len(c)) for c in per_row], indexing="ij")
    idx = [g.ravel() for g in grids]
    return np.stack([per_row[i][idx[i]] for i in range(L)], axis=1)


def support_size(model, N):
    """Number of supported count vectors (via a count-only dynamic program)."""
    L = model.domain_size
    states = compositions(N, L)
    # ways[a] = number of child tables for parent counts a, bucketed by column sums
    st = model.structure
    key = {tuple(s): i for i, s in enumerate(states)}
    trans = np.zeros((len(states), len(states)), dtype=object)
    for a, row in enumerate(states):
        for t in _tables_with_rows(row):
            trans[a, key[tuple(t.sum(axis=0))]] += 1
    up = {}
    for v in reversed(st.order):
        acc = np.ones(len(states), dtype=object)
        for c in st.children[v]:
            acc = acc * up[c]
        if v == st.root:
            return int(acc.sum())
        up[v] = trans.dot(acc)


def iter_support(model, N):
    """Depth-first enumeration of every supported count vector.

    Edges are visited in root-first order; each edge table is built row by
    row from the parent's counts, so only consistent tables are generated.
    """
    st = model.structure
    L = model.domain_size
    directed = st.directed_edges()
    tables_cache = {}

    def tables(row):
        key = tuple(row)
        if key not in tables_cache:
            tables_cache[key] = _tables_with_rows(row)
        return tables_cache[key]

    node = np.zeros((model.node_count, L), dtype=np.int64)
    edge = np.zeros((len(model.edges), L, L), dtype=np.int64)

    def rec(k):
        if k == len(directed):
            yield CountVector(N, node.copy(), edge.copy())
            return
        p, v, e = directed[k]
        for t in tables(node[p]):
            node[v] = t.sum(axis=0)
            edge[e] = t.T if st.flipped[v] else t
            yield from rec(k + 1)

    for root_counts in compositions(N, L):
        node[st.root] = root_counts
        yield from rec(0)


def observation_loglik(y_u, n_u, noise):
    """Exact log p(y_u | n_u) for integer counts; vectorized over rows of ``n_u``."""
    y_u = np.asarray(y_u, dtype=float)
    n_u = np.asarray(n_u, dtype=float)
    if noise.kind == "exact":
        return np.where(np.all(n_u == y_u, axis=-1), 0.0, -np.inf)
    if noise.kind == "gaussian":
        v = noise.variance
        return np.sum(-0.5 * (y_u - n_u) ** 2 / v - 0.5 * math.log(2 * math.pi * v), axis=-1)
    rate = noise.lam * n_u
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(
            rate > 0,
            y_u * np.log(np.where(rate > 0, rate, 1.0)) - rate,
            np.where(y_u > 0, -np.inf, 0.0),
        )
    return np.sum(term - gammaln(y_u + 1.0), axis=-1)


class Posterior(NamedTuple):
    node_means: np.ndarray  # (n, L)
    edge_means: np.ndarray  # (E, L, L), model orientation
    log_evidence: float


def enumerate_posterior(model, y, N, guard=DEFAULT_GUARD, marginals=None):
    """Exact E[n | y] over all supported count vectors.

    The sum over the support is organised as sum-product on the tree of node
    count vectors: each edge factor sums over every edge table consistent
    with its two endpoint count vectors, so the result is the exhaustive sum
    without materializing the full product space.

    Raises
    ------
    TooLarge
        When the number of (edge table, edge) pairs to visit exceeds ``guard``.
    """
    if marginals is None:
        marginals = compute_marginals(model)
    st = model.structure
    L = model.domain_size
    states = compositions(N, L)
    K = len(states)
    work = 0
    for row in states:
        work += math.prod(math.comb(int(r) + L - 1, L - 1) for r in row)
    work *= max(len(model.edges), 1)
    if work > guard or K * K * L * L * max(len(model.edges), 1) > 4 * guard:
        raise TooLarge(f"exhaustive posterior needs ~{work:.3g} table visits (guard {guard:.3g})")

    radix = N + 1
    codes = states @ (radix ** np.arange(L))
    order_codes = np.argsort(codes)
    sorted_codes = codes[order_codes]

    def state_index(vectors):
        c = vectors @ (radix ** np.arange(L))
        return order_codes[np.searchsorted(sorted_codes, c)]

    tables = [_tables_with_rows(row) for row in states]
    col_index = [state_index(t.sum(axis=1)) for t in tables]
    lg_tables = [gammaln(t + 1.0).sum(axis=(1, 2)) for t in tables]

    nu = separator_multiplicity(model)
    lg_states = gammaln(states + 1.0).sum(axis=1)
    node_pot = []
    for u in range(model.node_count):
        pot = nu[u] * lg_states
        if u == st.root:
            pot = pot + np.array(
                [_dot_masked(model.root_table, s) for s in states]
            )
        if y.observed[u]:
            pot = pot + observation_loglik(y.y[u], states, y.noise)
        node_pot.append(pot)

    edge_pot = {}
    cond_means = {}
    for p, v, e in st.directed_edges():
        theta = model.oriented_table(v)
        log_phi = np.full((K, K), -np.inf)
        mean = np.zeros((K, K, L, L))
        for a in range(K):
            w = np.tensordot(tables[a], theta, axes=([1, 2], [0, 1])) - lg_tables[a]
            b_idx = col_index[a]
            # per (a, b) log-sum-exp over the tables landing in b
            m = np.full(K, -np.inf)
            np.maximum.at(m, b_idx, w)
            ex = np.exp(w - m[b_idx])
            tot = np.zeros(K)
            np.add.at(tot, b_idx, ex)
            acc = np.zeros((K, L, L))
            np.add.at(acc, b_idx, ex[:, None, None] * tables[a])
            hit = tot > 0
            log_phi[a, hit] = m[hit] + np.log(tot[hit])
            mean[a, hit] = acc[hit] / tot[hit, None, None]
        edge_pot[v] = log_phi
        cond_means[v] = mean

    node_marg, pair_marg, log_z = tree_sum_product(st, node_pot, edge_pot)
    log_evidence = log_z + gammaln(N + 1) - N * marginals.log_partition
    if not np.isfinite(log_evidence):
        raise UnsupportedCount("observations have zero probability under the model")

    node_means = np.array([pm @ states for pm in node_marg])
    edge_means = np.zeros((len(model.edges), L, L))
    for p, v, e in st.directed_edges():
        em = np.tensordot(pair_marg[v], cond_means[v], axes=([0, 1], [0, 1]))
        edge_means[e] = em.T if st.flipped[v] else em
    return Posterior(node_means, edge_means, float(log_evidence))


class BaselineResult(NamedTuple):
    node_means: np.ndarray
    edge_means: np.ndarray
    node_se: np.ndarray  # batch-means Monte Carlo standard errors
    edge_se: np.ndarray
    acceptance_rate: float
    final_counts: CountVector


def _feasible_start(model, y, N):
    """Population matching exact observations at every node, else None.

    Each edge table is filled by the north-west corner rule, which yields a
    table with the required margins; trajectories are then threaded through
    the tables from the root.
    """
    if y.noise.kind != "exact" or not np.all(y.observed):
        return None
    counts = np.asarray(y.y, dtype=np.int64)
    if np.any(counts.sum(axis=1) != N):
        return None
    st = model.structure
    traj = np.empty((N, model.node_count), dtype=np.int64)
    traj[:, st.root] = np.repeat(np.arange(model.domain_size), counts[st.root])
    for p, v, _ in st.directed_edges():
        rows, cols = counts[p].copy(), counts[v].copy()
        # slots of each parent state, assigned child states in order
        child = np.empty(N, dtype=np.int64)
        order = np.argsort(traj[:, p], kind="stable")
        pos = 0
        i = j = 0
        while pos < N:
            while rows[i] == 0:
                i += 1
            while cols[j] == 0:
                j += 1
            k = min(rows[i], cols[j])
            child[order[pos:pos + k]] = j
            rows[i] -= k
            cols[j] -= k
            pos += k
        traj[:, v] = child
    return traj


def sample_posterior_baseline(
    model,
    y,
    N,
    burn_in,
    iters,
    seed,
    n_batches=20,
    init=None,
    marginals=None,
    chunk=None,
    backend=None,
):
    """Individual-space Metropolis-Hastings estimate of E[n | y].

    Each sweep visits every individual once and proposes a fresh trajectory
    by forward-filtering backward-sampling under the individual model (with
    no per-individual evidence this is exact ancestral sampling from the
    model).  The proposal is the prior, so the acceptance ratio reduces to
    the ratio of observation likelihoods of the induced counts.  From an
    infeasible start (zero likelihood) moves that reduce the number of
    violated observation cells are always accepted, and moves that add
    violations are rejected; once feasible the chain is plain MH.

    Parameters
    ----------
    init : Population, optional
        Starting state; defaults to a prior sample (or a consistent
        population when every node is observed exactly).
    n_batches : int
        Batches used for the batch-means standard errors.
    backend : {"cython", "python"}, optional
        Kernel backend; defaults to the active one (see :mod:`gcgm.kernels`).

    Returns
    -------
    BaselineResult
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if marginals is None:
        marginals = compute_marginals(model)
    rng = np.random.default_rng(seed)
    st = model.structure
    n, L = model.node_count, model.domain_size

    if init is not None:
        traj = np.array(init.trajectories, dtype=np.int64)
    else:
        traj = _feasible_start(model, y, N)
        if traj is None:
            traj = sample_population(model, N, rng, marginals).trajectories.astype(np.int64)
    traj = np.ascontiguousarray(traj)
    start = sufficient_stats(Population(traj), model)
    node_counts = np.ascontiguousarray(start.node_counts, dtype=np.int64)
    edge_counts = np.zeros((n, L, L), dtype=np.int64)
    for p, v, e in st.directed_edges():
        t = start.edge_counts[e]
        edge_counts[v] = t.T if st.flipped[v] else t

    cond = _conditionals(model, marginals)
    cond_cum = np.zeros((n, L, L))
    for v, c in cond.items():
        cond_cum[v] = np.cumsum(c, axis=1)
    root_cum = np.ascontiguousarray(np.cumsum(marginals.node_marginals[st.root]))
    order = np.array(st.order, dtype=np.int64)
    parent = np.array(st.parent, dtype=np.int64)
    yv = np.ascontiguousarray(np.asarray(y.y, dtype=float))
    observed = np.ascontiguousarray(np.asarray(y.observed, dtype=np.uint8))
    code = kernels.NOISE_CODES[y.noise.kind]
    param = {"exact": 0.0, "gaussian": y.noise.variance, "poisson": y.noise.lam}[y.noise.kind]
    sweep = kernels.get(backend).mh_sweeps

    if iters <= 0:
        final = _as_countvector(N, node_counts, edge_counts, model)
        return BaselineResult(
            final.node_counts.astype(float),
            final.edge_counts.astype(float),
            np.zeros((n, L)),
            np.zeros((len(model.edges), L, L)),
            0.0,
            final,
        )

    n_batches = max(1, min(n_batches, iters))
    node_acc = np.zeros((n_batches, n, L))
    edge_acc = np.zeros((n_batches, n, L, L))
    total = burn_in + iters
    slots = np.full(total, -1, dtype=np.int64)
    slots[burn_in:] = (np.arange(iters) * n_batches) // iters
    batch_sizes = np.bincount(slots[burn_in:], minlength=n_batches)

    if chunk is None:
        chunk = max(1, 2_000_000 // (N * (n + 1)))
    accepted = 0
    for s0 in range(0, total, chunk):
        s1 = min(total, s0 + chunk)
        u = rng.random((s1 - s0, N, n + 1))
        accepted += sweep(
            traj, order, parent, root_cum, cond_cum, node_counts, edge_counts,
            yv, observed, code, float(param), u, slots[s0:s1], node_acc, edge_acc,
        )

    batch_node = node_acc / batch_sizes[:, None, None]
    batch_edge = edge_acc / batch_sizes[:, None, None, None]
    node_mean = node_acc.sum(axis=0) / iters
    edge_mean_o = edge_acc.sum(axis=0) / iters
    if n_batches > 1:
        node_se = batch_node.std(axis=0, ddof=1) / math.sqrt(n_batches)
        edge_se_o = batch_edge.std(axis=0, ddof=1) / math.sqrt(n_batches)
    else:
        node_se = np.full((n, L), np.nan)
        edge_se_o = np.full((n, L, L), np.nan)

    edge_mean = np.zeros((len(model.edges), L, L))
    edge_se = np.zeros((len(model.edges), L, L))
    for p, v, e in st.directed_edges():
        flip = st.flipped[v]
        edge_mean[e] = edge_mean_o[v].T if flip else edge_mean_o[v]
        edge_se[e] = edge_se_o[v].T if flip else edge_se_o[v]
    final = _as_countvector(N, node_counts, edge_counts, model)
    return BaselineResult(
        node_mean, edge_mean, node_se, edge_se, accepted / (total * N), final
    )


def _as_countvector(N, node_counts, oriented_edges, model):
    st = model.structure
    edge = np.zeros((len(model.edges), model.domain_size, model.domain_size), dtype=np.int64)
    for p, v, e in st.directed_edges():
        edge[e] = oriented_edges[v].T if st.flipped[v] else oriented_edges[v]
    return CountVector(N, node_counts.copy(), edge)
