"""Moment-matched Gaussian approximation of the CGM on trees.

Counts are handled in reduced coordinates: for every node one reference
state is dropped (the last state with nonnegligible probability), and an
edge keeps only the sub-table over the two nodes' reduced states.  The
dropped entries are affine functions of the kept ones and ``N``, so
nothing is lost; the reduced covariance is full rank.

Only node-level blocks are ever inverted; the edge-count posterior mean is
an affine function of the node-pair mean and is recovered on demand.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .counts import CountVector
from .errors import DegenerateMarginal, SingularBlock

__all__ = [
    "PRUNE_THRESHOLD",
    "JITTER",
    "ReductionTransform",
    "GaussianMoments",
    "FactoredGaussian",
    "GaussianPosterior",
    "build_moments",
    "reduce_counts",
    "lift_counts",
    "clique_transform",
    "factorize",
    "condition_exact",
    "edge_posterior",
    "edge_conditional_full",
    "node_covariance",
    "precision_pattern",
    "lifting_map",
    "InconsistentExactObservation",
]

PRUNE_THRESHOLD = 1e-12
JITTER = 1e-9


class InconsistentExactObservation(UserWarning):
    pass


@dataclass(frozen=True)
class ReductionTransform:
    """Bookkeeping between full count vectors and reduced coordinates.

    ``kept[u]`` are the reduced states of node ``u`` and ``reference[u]`` the
    dropped one; states outside ``kept[u] + [reference[u]]`` were pruned and
    are identically zero.
    """

    node_count: int
    domain_size: int
    edges: tuple
    kept: tuple
    reference: tuple
    pruned: tuple  # per node, states removed for negligible probability

    @classmethod
    def from_marginals(cls, model, marginals, threshold=PRUNE_THRESHOLD):
        kept, ref, pruned = [], [], []
        for u in range(model.node_count):
            mu = marginals.node_marginals[u]
            active = np.flatnonzero(mu >= threshold)
            if active.size == 0:
                raise DegenerateMarginal(f"node {u} has no state above the threshold")
            ref.append(int(active[-1]))
            kept.append(active[:-1].copy())
            pruned.append(np.flatnonzero(mu < threshold))
        return cls(model.node_count, model.domain_size, model.edges,
                   tuple(kept), tuple(ref), tuple(pruned))

    @classmethod
    def standard(cls, node_count, domain_size, edges):
        """Drop the last state everywhere, no pruning."""
        kept = tuple(np.arange(domain_size - 1) for _ in range(node_count))
        return cls(node_count, domain_size, tuple(edges), kept,
                   tuple(domain_size - 1 for _ in range(node_count)),
                   tuple(np.array([], dtype=int) for _ in range(node_count)))

    def dim(self, u):
        return len(self.kept[u])

    def active(self, u):
        return np.append(self.kept[u], self.reference[u])

    # node vectors -----------------------------------------------------
    def reduce_node(self, u, full):
        return np.asarray(full)[..., self.kept[u]]

    def lift_node(self, u, reduced, N):
        reduced = np.asarray(reduced, dtype=float)
        out = np.zeros(reduced.shape[:-1] + (self.domain_size,))
        out[..., self.kept[u]] = reduced
        out[..., self.reference[u]] = N - reduced.sum(axis=-1)
        return out

    # edge tables ------------------------------------------------------
    def reduce_edge(self, e, table):
        u, v = self.edges[e]
        return np.asarray(table)[np.ix_(self.kept[u], self.kept[v])]

    def lift_edge(self, e, reduced, node_u, node_v):
        """Full table from the reduced sub-table and the two full node vectors."""
        u, v = self.edges[e]
        ku, kv = self.kept[u], self.kept[v]
        ru, rv = self.reference[u], self.reference[v]
        node_u = np.asarray(node_u, dtype=float)
        node_v = np.asarray(node_v, dtype=float)
        t = np.zeros((self.domain_size, self.domain_size))
        t[np.ix_(ku, kv)] = reduced
        t[ku, rv] = node_u[ku] - t[np.ix_(ku, kv)].sum(axis=1)
        t[ru, kv] = node_v[kv] - t[np.ix_(ku, kv)].sum(axis=0)
        t[ru, rv] = node_u[ru] - t[ru, kv].sum()
        return t

    # flat layout ------------------------------------------------------
    def layout(self):
        """List of (kind, index, size) blocks of the flat reduced vector."""
        blocks = [("node", u, self.dim(u)) for u in range(self.node_count)]
        for e, (u, v) in enumerate(self.edges):
            blocks.append(("edge", e, self.dim(u) * self.dim(v)))
        return blocks


def reduce_counts(n, transform):
    """Flat reduced vector: node blocks then edge sub-tables (row-major)."""
    parts = [transform.reduce_node(u, n.node_counts[u]) for u in range(transform.node_count)]
    parts += [transform.reduce_edge(e, n.edge_counts[e]).ravel() for e in range(len(transform.edges))]
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def lift_counts(reduced, N, transform, tol=1e-9):
    """Inverse of :func:`reduce_counts`.

    Returns
    -------
    CountVector
        Integer dtype when every lifted entry is integral, float otherwise.
    bool
        NegativeReconstruction flag: some lifted entry is below ``-tol``.
    """
    reduced = np.asarray(reduced, dtype=float)
    pos = 0
    L = transform.domain_size
    node = np.zeros((transform.node_count, L))
    for u in range(transform.node_count):
        d = transform.dim(u)
        node[u] = transform.lift_node(u, reduced[pos:pos + d], N)
        pos += d
    edge = np.zeros((len(transform.edges), L, L))
    for e, (u, v) in enumerate(transform.edges):
        d = transform.dim(u) * transform.dim(v)
        sub = reduced[pos:pos + d].reshape(transform.dim(u), transform.dim(v))
        edge[e] = transform.lift_edge(e, sub, node[u], node[v])
        pos += d
    negative = bool(np.any(node < -tol) or np.any(edge < -tol))
    if np.all(node == np.round(node)) and np.all(edge == np.round(edge)):
        node = np.round(node).astype(np.int64)
        edge = np.round(edge).astype(np.int64)
    return CountVector(N, node, edge), negative


def clique_transform(L):
    """Indicator map from the L*L configurations of an edge clique to reduced coordinates.

    Rows: the L-1 reduced states of the first node, of the second node, then
    the (L-1)^2 reduced pairs; column ``i * L + j`` is configuration (i, j).
    Entry is 1 when the row's sub-configuration agrees with the column.
    """
    rows = []
    cfg = [(i, j) for i in range(L) for j in range(L)]
    for k in range(L - 1):
        rows.append([1.0 if i == k else 0.0 for i, j in cfg])
    for k in range(L - 1):
        rows.append([1.0 if j == k else 0.0 for i, j in cfg])
    for a in range(L - 1):
        for b in range(L - 1):
            rows.append([1.0 if (i, j) == (a, b) else 0.0 for i, j in cfg])
    return np.array(rows)


@dataclass(frozen=True)
class GaussianMoments:
    """Reduced means and covariances of the GCGM, node and edge blocks.

    ``edge_mean[e]`` / ``edge_cov[e]`` cover (z_u, z_v) for ``edges[e] == (u, v)``.
    """

    N: float
    transform: ReductionTransform
    node_probs: np.ndarray  # (n, L) source marginals
    edge_probs: np.ndarray  # (E, L, L)
    node_mean: tuple
    node_cov: tuple
    edge_mean: tuple
    edge_cov: tuple
    jittered: tuple = field(default=())  # edges whose joint block needed jitter

    @property
    def edges(self):
        return self.transform.edges

    def extended_block(self, e):
        """Mean and covariance of (z_u, z_v, z_uv) in reduced coordinates."""
        u, v = self.edges[e]
        tr = self.transform
        ku, kv = tr.kept[u], tr.kept[v]
        m_uv = self.edge_probs[e]
        cfg = m_uv.ravel()
        L = tr.domain_size
        # rows of the indicator map restricted to this edge's reduced coordinates
        T = []
        for k in ku:
            T.append(np.repeat(np.arange(L) == k, L))
        for k in kv:
            T.append(np.tile(np.arange(L) == k, L))
        for a in ku:
            for b in kv:
                r = np.zeros(L * L, dtype=bool)
                r[a * L + b] = True
                T.append(r)
        T = np.array(T, dtype=float).reshape(-1, L * L)
        mean = self.N * (T @ cfg)
        cov = self.N * (T @ (np.diag(cfg) - np.outer(cfg, cfg)) @ T.T)
        return mean, cov


def _jitter(cov, N):
    """Add floor * I when the smallest eigenvalue is below floor = JITTER * N."""
    if cov.shape[0] == 0:
        return cov, False
    floor = JITTER * N
    shifted = cov - floor * np.eye(cov.shape[0])
    try:
        # factors iff every eigenvalue of cov exceeds the floor
        np.linalg.cholesky(shifted)
        return cov, False
    except np.linalg.LinAlgError:
        return cov + floor * np.eye(cov.shape[0]), True


def build_moments(model, marginals, N, transform=None):
    """Moment-matched Gaussian N(N mu, N Sigma) in reduced coordinates."""
    tr = transform or ReductionTransform.from_marginals(model, marginals)
    node_mean, node_cov = [], []
    for u in range(model.node_count):
        mu = marginals.node_marginals[u][tr.kept[u]]
        node_mean.append(N * mu)
        node_cov.append(N * (np.diag(mu) - np.outer(mu, mu)))
    edge_mean, edge_cov, jittered = [], [], []
    for e, (u, v) in enumerate(model.edges):
        mu_u = marginals.node_marginals[u][tr.kept[u]]
        mu_v = marginals.node_marginals[v][tr.kept[v]]
        m = marginals.edge_marginals[e][np.ix_(tr.kept[u], tr.kept[v])]
        mu = np.concatenate([mu_u, mu_v])
        du = mu_u.size
        second = np.diag(mu)
        second[:du, du:] = m
        second[du:, :du] = m.T
        cov, jit = _jitter(N * (second - np.outer(mu, mu)), N)
        if jit:
            jittered.append(e)
        edge_mean.append(N * mu)
        edge_cov.append(cov)
    return GaussianMoments(
        float(N), tr,
        np.asarray(marginals.node_marginals), np.asarray(marginals.edge_marginals),
        tuple(node_mean), tuple(node_cov), tuple(edge_mean), tuple(edge_cov), tuple(jittered),
    )


def _oriented_joint(moments, e, parent_first):
    """(mean, cov) of edge ``e`` ordered (first, second) as requested."""
    u, v = moments.edges[e]
    mean, cov = moments.edge_mean[e], moments.edge_cov[e]
    if parent_first:
        return mean, cov
    du = moments.transform.dim(u)
    perm = np.r_[np.arange(du, mean.size), np.arange(du)]
    return mean[perm], cov[np.ix_(perm, perm)]


def _pd_inv(a, what="block", edge=None):
    if a.shape[0] == 0:
        return a.copy()
    try:
        if not np.all(np.isfinite(a)):
            raise np.linalg.LinAlgError("non-finite entries")
        ci = np.linalg.inv(np.linalg.cholesky(a))
    except np.linalg.LinAlgError as exc:
        raise SingularBlock(f"{what} is not positive definite", edge=edge) from exc
    return ci.T @ ci


@dataclass(frozen=True)
class FactoredGaussian:
    """p(z_r) * prod over directed edges of p(z_v | z_u), away from the root.

    ``gain[v]``, ``offset[v]`` and ``cond_cov[v]`` parametrize
    z_v | z_parent ~ N(gain z_parent + offset, cond_cov) for every non-root v.
    """

    moments: GaussianMoments
    structure: object
    root_mean: np.ndarray
    root_cov: np.ndarray
    gain: dict
    offset: dict
    cond_cov: dict
    cond_prec: dict

    @property
    def root(self):
        return self.structure.root

    @property
    def transform(self):
        return self.moments.transform

    @property
    def N(self):
        return self.moments.N

    def edge_information(self, v):
        """Information form of p(z_v | z_parent) over (z_parent, z_v).

        Returns ``(J_pp, J_pv, J_vv, h_p, h_v)`` with log-density
        ``-1/2 x' J x + h' x + const``.
        """
        G, b, P = self.gain[v], self.offset[v], self.cond_prec[v]
        PG = P @ G
        return G.T @ PG, -PG.T, P, -PG.T @ b, P @ b

    def marginals(self):
        """Per-node (mean, cov) and per-child cross-covariance with the parent."""
        st = self.structure
        n = len(st.order)
        mean = [None] * n
        cov = [None] * n
        cross = {}
        mean[st.root], cov[st.root] = self.root_mean, self.root_cov
        for p, v, _ in st.directed_edges():
            G = self.gain[v]
            mean[v] = G @ mean[p] + self.offset[v]
            cross[v] = G @ cov[p]
            cov[v] = G @ cov[p] @ G.T + self.cond_cov[v]
            cov[v] = 0.5 * (cov[v] + cov[v].T)
        return mean, cov, cross

    def log_density(self, z):
        """log p(z_1, ..., z_n) for a list of reduced node vectors."""
        st = self.structure
        out = _gauss_logpdf(z[st.root], self.root_mean, self.root_cov)
        for p, v, _ in st.directed_edges():
            out += _gauss_logpdf(z[v], self.gain[v] @ z[p] + self.offset[v], self.cond_cov[v])
        return out


def _gauss_logpdf(x, mean, cov):
    d = mean.size
    if d == 0:
        return 0.0
    c = linalg.cho_factor(cov, lower=True)
    r = np.asarray(x) - mean
    maha = r @ linalg.cho_solve(c, r)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return -0.5 * (maha + logdet + d * np.log(2 * np.pi))


def factorize(moments, model, root=None):
    """Gaussian conditioning of every edge joint along directed edges."""
    st = model.structure if root is None or root == model.root else _restructure(model, root)
    tr = moments.transform
    r = st.root
    gain, offset, ccov, cprec = {}, {}, {}, {}
    for p, v, e in st.directed_edges():
        mean, cov = _oriented_joint(moments, e, parent_first=not st.flipped[v])
        dp = tr.dim(p)
        S_pp, S_pv = cov[:dp, :dp], cov[:dp, dp:]
        S_vv = cov[dp:, dp:]
        inv_pp = _pd_inv(S_pp, f"node {p} block", edge=e)
        G = S_pv.T @ inv_pp
        C = S_vv - G @ S_pv
        C = 0.5 * (C + C.T)
        gain[v] = G
        offset[v] = mean[dp:] - G @ mean[:dp]
        ccov[v] = C
        cprec[v] = _pd_inv(C, f"conditional block of edge {e}", edge=e)
    return FactoredGaussian(
        moments, st, moments.node_mean[r].copy(), moments.node_cov[r].copy(),
        gain, offset, ccov, cprec,
    )


def _restructure(model, root):
    from .model import _rooted_structure

    return _rooted_structure(model.node_count, model.edges, root)


def lifting_map(transform, u, N):
    """Affine map full_active = A @ reduced + c over the active states of ``u``."""
    d = transform.dim(u)
    A = np.vstack([np.eye(d), -np.ones((1, d))])
    c = np.zeros(d + 1)
    c[-1] = N
    return A, c


@dataclass
class GaussianPosterior:
    """Per-node posterior over reduced coordinates plus lifted full means."""

    means: list
    covs: list
    full_means: np.ndarray  # (n, L)
    negative: bool = False
    diagnostics: dict = field(default_factory=dict)


def _node_evidence(factored, y, u):
    """Information-form evidence (J, h) for node ``u`` under Gaussian noise."""
    tr = factored.transform
    A, c = lifting_map(tr, u, factored.N)
    y_act = np.asarray(y.y[u], dtype=float)[tr.active(u)]
    prec = 1.0 / y.noise.variance
    return prec * (A.T @ A), prec * (A.T @ (y_act - c))


def condition_exact(factored, y):
    """Closed-form posterior under exact or Gaussian node observations.

    Two-pass Gaussian message passing in information form.  Exactly observed
    nodes are clamped to their reduced observation and split the tree.
    """
    st = factored.structure
    tr = factored.transform
    N = factored.N
    n = len(st.order)
    if y.noise.kind not in ("exact", "gaussian"):
        raise ValueError("condition_exact handles exact or gaussian noise only")

    clamp = [None] * n
    J = [np.zeros((tr.dim(u), tr.dim(u))) for u in range(n)]
    h = [np.zeros(tr.dim(u)) for u in range(n)]
    r = st.root
    J[r] = _pd_inv(factored.root_cov, "root block")
    h[r] = J[r] @ factored.root_mean
    for u in range(n):
        if not y.observed[u]:
            continue
        if y.noise.kind == "exact":
            yu = np.asarray(y.y[u], dtype=float)
            if abs(yu.sum() - N) > 1e-9 * max(N, 1) or np.any(yu[tr.pruned[u]] > 0):
                warnings.warn(
                    f"exact observation at node {u} is inconsistent with N or pruned states",
                    InconsistentExactObservation,
                )
            clamp[u] = tr.reduce_node(u, yu)
        else:
            Je, he = _node_evidence(factored, y, u)
            J[u] = J[u] + Je
            h[u] = h[u] + he

    info = {v: factored.edge_information(v) for v in st.order[1:]}
    up = {}
    for v in reversed(st.order[1:]):
        A, B, D, hp, hv = info[v]
        if clamp[v] is not None:
            up[v] = (A, hp - B @ clamp[v])
            continue
        Jt = D + J[v]
        ht = hv + h[v]
        for c in st.children[v]:
            Jt = Jt + up[c][0]
            ht = ht + up[c][1]
        K = B @ _pd_inv(Jt, f"upward block at node {v}")
        up[v] = (A - K @ B.T, hp - K @ ht)

    down = {r: (np.zeros_like(J[r]), np.zeros_like(h[r]))}
    means, covs = [None] * n, [None] * n
    for v in st.order:
        if clamp[v] is not None:
            means[v] = clamp[v].astype(float)
            covs[v] = np.zeros((tr.dim(v), tr.dim(v)))
        else:
            Jp = J[v] + down[v][0]
            hp_ = h[v] + down[v][1]
            for c in st.children[v]:
                Jp = Jp + up[c][0]
                hp_ = hp_ + up[c][1]
            covs[v] = _pd_inv(Jp, f"posterior block at node {v}")
            means[v] = covs[v] @ hp_
        for c in st.children[v]:
            A, B, D, hpe, hve = info[c]
            if clamp[v] is not None:
                down[c] = (D, hve - B.T @ clamp[v])
                continue
            Jc = J[v] + down[v][0] + A
            hc = h[v] + down[v][1] + hpe
            for s in st.children[v]:
                if s != c:
                    Jc = Jc + up[s][0]
                    hc = hc + up[s][1]
            K = B.T @ _pd_inv(Jc, f"downward block at node {v}")
            down[c] = (D - K @ B, hve - K @ hc)

    full = np.array([tr.lift_node(u, means[u], N) for u in range(n)])
    return GaussianPosterior(means, covs, full, bool(np.any(full < -1e-9)))


def edge_conditional_full(moments, e, q_mean):
    """E[z_uv | z_u, z_v] for the full L x L table, at the reduced pair ``q_mean``.

    Uses cov(I_kl, I_u(i)) = mu_kl (delta_ik - mu_u(i)) so the cross
    covariance with the node pair is never materialized; the cost is one
    solve with the 2(L-1) pair covariance plus O(L^2).
    """
    u, v = moments.edges[e]
    tr = moments.transform
    du = tr.dim(u)
    x = _pd_solve(moments.edge_cov[e], np.asarray(q_mean, dtype=float) - moments.edge_mean[e], e)
    # covariances were scaled by N; rescale the solve to unit population
    x = x * moments.N
    L = tr.domain_size
    xu = np.zeros(L)
    xv = np.zeros(L)
    xu[tr.kept[u]] = x[:du]
    xv[tr.kept[v]] = x[du:]
    ru = xu - moments.node_probs[u] @ xu
    rv = xv - moments.node_probs[v] @ xv
    m = moments.edge_probs[e]
    return moments.N * m + m * (ru[:, None] + rv[None, :])


def _pd_solve(a, b, e=None):
    if a.shape[0] == 0:
        return np.zeros(0)
    try:
        return linalg.cho_solve(linalg.cho_factor(a, lower=True), b)
    except linalg.LinAlgError as exc:
        raise SingularBlock(f"edge {e} joint block is singular", edge=e) from exc


def edge_posterior(moments, e, q_mean):
    """Posterior mean of the full edge table given the node-pair mean.

    The conditional mean of the reduced edge entries is affine in the node
    pair, so its expectation under q only needs q's mean.  The reduced
    sub-table is then lifted using the lifted node means.
    """
    u, v = moments.edges[e]
    tr = moments.transform
    du = tr.dim(u)
    full = edge_conditional_full(moments, e, q_mean)
    sub = tr.reduce_edge(e, full)
    q_mean = np.asarray(q_mean, dtype=float)
    node_u = tr.lift_node(u, q_mean[:du], moments.N)
    node_v = tr.lift_node(v, q_mean[du:], moments.N)
    return tr.lift_edge(e, sub, node_u, node_v)


def node_covariance(factored):
    """Joint reduced covariance over all node blocks (edges marginalized).

    Cross-covariances propagate down the tree via the conditional gains.
    """
    st = factored.structure
    tr = factored.transform
    n = len(st.order)
    offs = np.cumsum([0] + [tr.dim(u) for u in range(n)])
    total = offs[-1]
    big = np.zeros((total, total))
    sl = lambda u: slice(offs[u], offs[u + 1])  # noqa: E731
    r = st.root
    big[sl(r), sl(r)] = factored.root_cov
    placed = [r]
    for p, v, _ in st.directed_edges():
        G = factored.gain[v]
        for w in placed:
            big[sl(v), sl(w)] = G @ big[sl(p), sl(w)]
            big[sl(w), sl(v)] = big[sl(v), sl(w)].T
        big[sl(v), sl(v)] = G @ big[sl(p), sl(p)] @ G.T + factored.cond_cov[v]
        placed.append(v)
    return 0.5 * (big + big.T), offs


def precision_pattern(factored):
    """Block sparsity of the node-level precision matrix.

    Returns
    -------
    report : dict (u, w) -> max |Gamma block| / max |Gamma|, for u < w
    gamma : the precision matrix
    """
    cov, offs = node_covariance(factored)
    gamma = _pd_inv(cov, "node-level covariance")
    scale = np.abs(gamma).max() if gamma.size else 1.0
    n = len(offs) - 1
    report = {}
    for u in range(n):
        for w in range(u + 1, n):
            blk = gamma[offs[u]:offs[u + 1], offs[w]:offs[w + 1]]
            report[(u, w)] = float(np.abs(blk).max() / scale) if blk.size else 0.0
    return report, gamma
