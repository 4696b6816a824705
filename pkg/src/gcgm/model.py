"""Tree-structured individual model: structure, exact marginals and sampling.

States are 0-based (``0 .. L-1``) throughout the package.  Edge tables are
indexed ``theta[e][x_u, x_v]`` for the edge ``edges[e] == (u, v)``; the
orientation used for message passing (parent -> child, away from the root)
is derived from the root and never changes the stored tables.

Log-potentials must be finite except that ``-inf`` is accepted in the root
table to express structural zeros (e.g. a point-mass initial state).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._treebp import tree_sum_product
from .counts import CountVector
from .errors import (
    CycleDetected,
    Disconnected,
    InvalidAssignment,
    NumericalOverflow,
    ShapeMismatch,
)

__all__ = [
    "TreeModel",
    "MarginalSet",
    "Population",
    "validate_tree",
    "compute_marginals",
    "log_prob_individual",
    "sample_population",
    "sufficient_stats",
]


@dataclass(frozen=True)
class TreeStructure:
    """Rooted view of the undirected edge list."""

    root: int
    order: tuple  # BFS pre-order, root first
    parent: tuple  # parent[v], -1 for the root
    parent_edge: tuple  # index into model.edges, -1 for the root
    flipped: tuple  # flipped[v] is True when edges[parent_edge[v]] == (v, parent)
    children: tuple
    degree: tuple

    def directed_edges(self):
        """Edges as (parent, child, edge index) in root-first order."""
        return [(self.parent[v], v, self.parent_edge[v]) for v in self.order[1:]]


class TreeModel:
    """Discrete pairwise model on a tree in exponential-family form.

    Parameters
    ----------
    node_count : int
    domain_size : int
    edges : sequence of (u, v)
    log_potentials : sequence of (L, L) arrays, one per edge
    root_log_potential : (L,) array or None
    root : int
    validate : bool
        Run :func:`validate_tree` on construction.
    """

    def __init__(
        self,
        node_count,
        domain_size,
        edges,
        log_potentials,
        root_log_potential=None,
        root=0,
        validate=True,
    ):
        self.node_count = int(node_count)
        self.domain_size = int(domain_size)
        self.edges = tuple((int(u), int(v)) for u, v in edges)
        self.log_potentials = tuple(np.array(t, dtype=float) for t in log_potentials)
        for t in self.log_potentials:
            t.setflags(write=False)
        if root_log_potential is None:
            self.root_log_potential = None
        else:
            self.root_log_potential = np.array(root_log_potential, dtype=float)
            self.root_log_potential.setflags(write=False)
        self.root = int(root)
        if validate:
            validate_tree(self)

    @classmethod
    def from_potentials(
        cls, node_count, domain_size, edges, edge_potentials, node_potentials=None, root=0
    ):
        """Build a model, folding per-node log-potentials into incident edges.

        The root's node table becomes the root table; every other node's
        table is added to the edge joining it to its parent.
        """
        model = cls(node_count, domain_size, edges, edge_potentials, None, root)
        if node_potentials is None:
            return model
        tables = [t.copy() for t in model.log_potentials]
        st = model.structure
        root_table = np.zeros(model.domain_size)
        for v, pot in enumerate(node_potentials):
            if pot is None:
                continue
            pot = np.asarray(pot, dtype=float)
            if v == st.root:
                root_table = root_table + pot
            elif st.flipped[v]:
                tables[st.parent_edge[v]] += pot[:, None]
            else:
                tables[st.parent_edge[v]] += pot[None, :]
        return cls(node_count, domain_size, edges, tables, root_table, root)

    @cached_property
    def structure(self):
        return _rooted_structure(self.node_count, self.edges, self.root)

    def oriented_table(self, child):
        """Log-potential of the edge above ``child`` indexed [x_parent, x_child]."""
        st = self.structure
        t = self.log_potentials[st.parent_edge[child]]
        return t.T if st.flipped[child] else t

    @property
    def root_table(self):
        if self.root_log_potential is None:
            return np.zeros(self.domain_size)
        return self.root_log_potential

    def __repr__(self):
        return (
            f"TreeModel(node_count={self.node_count}, domain_size={self.domain_size}, "
            f"edges={list(self.edges)}, root={self.root})"
        )


def _rooted_structure(n, edges, root):
    adj = [[] for _ in range(n)]
    for e, (u, v) in enumerate(edges):
        adj[u].append((v, e, False))
        adj[v].append((u, e, True))
    parent = [-1] * n
    parent_edge = [-1] * n
    flipped = [False] * n
    children = [[] for _ in range(n)]
    seen = [False] * n
    seen[root] = True
    order = []
    queue = deque([root])
    while queue:
        u = queue.popleft()
        order.append(u)
        for v, e, rev in adj[u]:
            if seen[v]:
                continue
            seen[v] = True
            parent[v] = u
            parent_edge[v] = e
            # edge stored as (u, v) with u the parent -> not flipped
            flipped[v] = rev
            children[u].append(v)
            queue.append(v)
    return TreeStructure(
        root=root,
        order=tuple(order),
        parent=tuple(parent),
        parent_edge=tuple(parent_edge),
        flipped=tuple(flipped),
        children=tuple(tuple(c) for c in children),
        degree=tuple(len(a) for a in adj),
    )


@dataclass(frozen=True)
class MarginalSet:
    """Exact node and edge marginals plus the log-partition function."""

    node_marginals: np.ndarray  # (n, L)
    edge_marginals: np.ndarray  # (E, L, L), same orientation as model.edges
    log_partition: float

    def edge_marginal(self, e):
        return self.edge_marginals[e]


@dataclass(frozen=True)
class Population:
    trajectories: np.ndarray  # (N, n) int

    @property
    def N(self):
        return self.trajectories.shape[0]


def validate_tree(model):
    """Check the tree invariants; raises on the first violation."""
    n, L = model.node_count, model.domain_size
    if n < 1:
        raise ShapeMismatch("node_count must be >= 1")
    if L < 2:
        raise ShapeMismatch("domain_size must be >= 2")
    if len(model.log_potentials) != len(model.edges):
        raise ShapeMismatch(
            f"{len(model.edges)} edges but {len(model.log_potentials)} potential tables"
        )
    for e, (u, v) in enumerate(model.edges):
        if not (0 <= u < n and 0 <= v < n) or u == v:
            raise ShapeMismatch(f"edge {e} = {(u, v)} is not a pair of distinct nodes")
    if not 0 <= model.root < n:
        raise ShapeMismatch(f"root {model.root} out of range")

    # union-find: a cycle shows up as an edge joining an existing component
    comp = list(range(n))

    def find(a):
        while comp[a] != a:
            comp[a] = comp[comp[a]]
            a = comp[a]
        return a

    for u, v in model.edges:
        ru, rv = find(u), find(v)
        if ru == rv:
            raise CycleDetected(f"edge {(u, v)} closes a cycle")
        comp[ru] = rv
    if len({find(a) for a in range(n)}) != 1:
        raise Disconnected("edge set does not connect all nodes")

    for e, t in enumerate(model.log_potentials):
        if t.shape != (L, L):
            raise ShapeMismatch(f"potential table {e} has shape {t.shape}, expected {(L, L)}")
        if not np.all(np.isfinite(t)):
            raise ShapeMismatch(f"potential table {e} has non-finite entries")
    if model.root_log_potential is not None:
        r = model.root_log_potential
        if r.shape != (L,):
            raise ShapeMismatch(f"root table has shape {r.shape}, expected {(L,)}")
        if np.any(np.isnan(r)) or np.any(r == np.inf) or np.all(r == -np.inf):
            raise ShapeMismatch("root table must be finite or -inf with one finite entry")
    return True


def compute_marginals(model):
    """Exact sum-product on the tree in log space.

    Returns
    -------
    MarginalSet
    """
    st = model.structure
    n, L = model.node_count, model.domain_size
    node_pot = [np.zeros(L) for _ in range(n)]
    node_pot[st.root] = np.array(model.root_table)
    edge_pot = {v: model.oriented_table(v) for v in st.order[1:]}
    node_list, pair, log_z = tree_sum_product(st, node_pot, edge_pot)
    if not np.isfinite(log_z):
        raise NumericalOverflow(f"log-partition is {log_z}")

    node_m = np.array(node_list)
    edge_m = np.empty((len(model.edges), L, L))
    for v, table in pair.items():
        edge_m[st.parent_edge[v]] = table.T if st.flipped[v] else table
    # absorb round-off so the simplex invariants hold to machine precision
    node_m /= node_m.sum(axis=1, keepdims=True)
    edge_m /= edge_m.sum(axis=(1, 2), keepdims=True)
    node_m.setflags(write=False)
    edge_m.setflags(write=False)
    return MarginalSet(node_m, edge_m, log_z)


def log_prob_individual(model, x, marginals=None):
    """Log-probability of a single assignment ``x`` (length node_count)."""
    x = np.asarray(x)
    if x.shape != (model.node_count,):
        raise InvalidAssignment(f"assignment must have length {model.node_count}")
    if not np.issubdtype(x.dtype, np.integer) or x.min() < 0 or x.max() >= model.domain_size:
        raise InvalidAssignment(f"assignment entries must be integers in [0, {model.domain_size})")
    if marginals is None:
        marginals = compute_marginals(model)
    total = model.root_table[x[model.root]]
    for (u, v), t in zip(model.edges, model.log_potentials):
        total += t[x[u], x[v]]
    return float(total - marginals.log_partition)


def _conditionals(model, marginals):
    """Per non-root node: table P(x_child | x_parent) as [x_parent, x_child]."""
    st = model.structure
    cond = {}
    for p, v, e in st.directed_edges():
        table = marginals.edge_marginals[e]
        table = table.T if st.flipped[v] else table
        row = table.sum(axis=1, keepdims=True)
        safe = np.where(row > 0, row, 1.0)
        c = np.where(row > 0, table / safe, 1.0 / model.domain_size)
        cond[v] = c / c.sum(axis=1, keepdims=True)
    return cond


def _categorical(cum, u):
    """Inverse-CDF draws; ``cum`` rows are cumulative distributions."""
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def sample_population(model, N, seed, marginals=None):
    """Ancestral sampling of ``N`` i.i.d. individuals (numpy PCG64 from ``seed``)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if marginals is None:
        marginals = compute_marginals(model)
    rng = np.random.default_rng(seed)
    st = model.structure
    cond = _conditionals(model, marginals)
    traj = np.empty((N, model.node_count), dtype=np.int64)
    root_cum = np.cumsum(marginals.node_marginals[st.root])
    traj[:, st.root] = _categorical(root_cum[None, :], rng.random(N))
    for p, v, _ in st.directed_edges():
        cum = np.cumsum(cond[v], axis=1)
        traj[:, v] = _categorical(cum[traj[:, p]], rng.random(N))
    return Population(traj)


def sufficient_stats(pop, model):
    """Node and edge counts of a population."""
    traj = np.asarray(pop.trajectories)
    N = traj.shape[0]
    n, L = model.node_count, model.domain_size
    if traj.ndim != 2 or traj.shape[1] != n:
        raise ShapeMismatch(f"trajectories must have shape (N, {n})")
    if traj.size and (traj.min() < 0 or traj.max() >= L):
        raise ShapeMismatch("trajectory entries out of range")
    node = np.stack([np.bincount(traj[:, u], minlength=L) for u in range(n)]).astype(np.int64)
    edge = np.zeros((len(model.edges), L, L), dtype=np.int64)
    for e, (u, v) in enumerate(model.edges):
        edge[e] = np.bincount(traj[:, u] * L + traj[:, v], minlength=L * L).reshape(L, L)
    return CountVector(N, node, edge)
