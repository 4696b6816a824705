"""Generic log-space sum-product on a rooted tree with discrete node states."""
import numpy as np


def logsumexp(a, axis=None):
    """log(sum(exp(a))) along ``axis``; rows that are entirely -inf give -inf.

    A lean stand-in for :func:`scipy.special.logsumexp`, whose input
    handling dominates the cost on the small arrays used here.
    """
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out.squeeze(axis=axis) if axis is not None else out.reshape(())


def tree_sum_product(structure, node_pot, edge_pot):
    """Exact marginals of ``prod_v exp(node_pot[v]) * prod_edges exp(edge_pot[c])``.

    Parameters
    ----------
    structure : TreeStructure
    node_pot : list of 1-d arrays, one per node (state spaces may differ)
    edge_pot : dict child -> 2-d array indexed [x_parent, x_child]

    Returns
    -------
    node_marg : list of 1-d arrays
    pair_marg : dict child -> 2-d array [x_parent, x_child]
    log_z : float
        When it is ``-inf`` the two marginal outputs are ``None``.
    """
    st = structure
    n = len(st.order)
    up = [None] * n
    ins = [None] * n
    for v in reversed(st.order):
        acc = np.array(node_pot[v], dtype=float)
        for c in st.children[v]:
            acc = acc + up[c]
        ins[v] = acc
        if v != st.root:
            up[v] = logsumexp(edge_pot[v] + acc[None, :], axis=1)
    log_z = float(logsumexp(ins[st.root]))
    if not np.isfinite(log_z):
        return None, None, log_z

    down = [None] * n
    down[st.root] = np.zeros_like(ins[st.root])
    node_marg = [None] * n
    pair_marg = {}
    for v in st.order:
        node_marg[v] = np.exp(ins[v] + down[v] - log_z)
        for c in st.children[v]:
            # recompute the cavity rather than subtract: up[c] may hold -inf
            cavity = down[v] + node_pot[v]
            for s in st.children[v]:
                if s != c:
                    cavity = cavity + up[s]
            base = cavity[:, None] + edge_pot[c]
            down[c] = logsumexp(base, axis=0)
            pair_marg[c] = np.exp(base + ins[c][None, :] - log_z)
    return node_marg, pair_marg, log_z
