"""Expectation propagation with Laplace projections for node-count inference.

The node-only factored Gaussian is combined with per-node observation terms
into one potential per directed edge: the child's conditional times the
child's likelihood, and on one designated root edge also the root marginal
and the root's likelihood.  Each potential is replaced by a pair of Gaussian
messages, one per endpoint, refined in context until they stop changing.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from . import kernels
from .counts import NoiseModel
from .errors import DomainError
from .gaussian import (
    GaussianPosterior,
    _pd_inv,
    condition_exact,
    factorize,
    lifting_map,
)

__all__ = [
    "NoiseModel",
    "EPOptions",
    "EPMessage",
    "EPState",
    "LaplaceResult",
    "EPResult",
    "poisson_loglik",
    "NodeEvidence",
    "EdgePotential",
    "edge_potential",
    "laplace_project",
    "ep_update_edge",
    "init_state",
    "run_ep",
]

EPS_FRACTION = 1e-6  # Poisson clamp level as a fraction of N
CLIP_TOL = 1e-10
JITTER_FLOOR = 1e-9  # eigenvalue floor for a non-PD Hessian, relative to N


def poisson_loglik(y, z, lam, eps=0.0):
    """Poisson log-likelihood of counts ``y`` at rates ``lam * z``.

    Returns
    -------
    value : float
    gradient : ndarray, d/dz
    hessian_diag : ndarray, d^2/dz^2
    """
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    pos = y > 0
    if np.any(z[pos] <= eps):
        raise DomainError(f"rate argument must exceed {eps:g} where y > 0")
    safe = np.where(pos, z, 1.0)
    value = np.sum(np.where(pos, y * np.log(lam * safe), 0.0) - lam * z - gammaln(y + 1.0))
    grad = np.where(pos, y / safe, 0.0) - lam
    hess = np.where(pos, -y / safe**2, 0.0)
    return float(value), grad, hess


def _poisson_extended(y, z, lam, eps, logfact=None):
    """Poisson term continued below ``eps`` by its second-order Taylor expansion.

    The extension is C2 and concave, so the Newton iteration stays well
    defined when an iterate wanders to z <= 0.  Cells with y = 0 are linear
    and never clamped.  Returns value, gradient, Hessian diagonal and the
    number of clamped cells.
    """
    if logfact is None:
        logfact = gammaln(y + 1.0)
    zc = np.maximum(z, eps)
    dz = np.minimum(z - eps, 0.0)
    g1 = y / zc
    h1 = -g1 / zc
    value = np.sum(y * np.log(lam * zc) - logfact + dz * (g1 + 0.5 * h1 * dz) - lam * z)
    clamped = int(np.count_nonzero((dz < 0) & (y > 0)))
    return float(value), g1 + h1 * dz - lam, h1, clamped


@dataclass(frozen=True)
class EPOptions:
    max_sweeps: int = 50
    tol: float = 1e-6
    damping: float = 1.0
    inner_max_iters: int = 200
    inner_tol: float = 1e-8  # gradient inf-norm, relative to N
    backend: str | None = None  # kernel backend, None for the active one

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")
        if self.max_sweeps < 1 or self.inner_max_iters < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class EPMessage:
    """Gaussian factor exp(-1/2 z' prec z + shift' z) over a reduced node vector."""

    prec: np.ndarray
    shift: np.ndarray

    @classmethod
    def zero(cls, d):
        return cls(np.zeros((d, d)), np.zeros(d))

    def copy(self):
        return EPMessage(self.prec.copy(), self.shift.copy())


class NodeEvidence:
    """Observation term of one node as a function of its reduced vector.

    Gaussian noise is exactly quadratic and is exposed through
    :meth:`quadratic`; Poisson noise is evaluated on the lifted active
    states with the clamp extension.
    """

    def __init__(self, transform, u, y_u, noise, N):
        self.u = u
        self.noise = noise
        self.N = float(N)
        active = transform.active(u)
        self.y = np.asarray(y_u, dtype=float)[active]
        self.y_full = np.asarray(y_u, dtype=float)
        self.pruned_hits = int(np.count_nonzero(self.y_full[transform.pruned[u]] > 0))
        self.eps = EPS_FRACTION * self.N
        self.logfact = gammaln(self.y + 1.0)
        self.transform = transform

    @property
    def gaussian(self):
        return self.noise.kind == "gaussian"

    @cached_property
    def _lift(self):
        return lifting_map(self.transform, self.u, self.N)

    @property
    def A(self):
        return self._lift[0]

    @property
    def c(self):
        return self._lift[1]

    def quadratic(self):
        """(J, h) such that the term is -1/2 z'Jz + h'z + const (Gaussian noise)."""
        p = 1.0 / self.noise.variance
        return p * (self.A.T @ self.A), p * (self.A.T @ (self.y - self.c))

    def lifted(self, z):
        return np.append(z, self.N - z.sum())

    def value(self, z):
        full = self.lifted(z)
        if self.noise.kind == "poisson":
            return poisson_loglik(self.y, full, self.noise.lam)[0]
        if self.noise.kind == "gaussian":
            v = self.noise.variance
            r = self.y - full
            return float(-0.5 * r @ r / v - 0.5 * r.size * math.log(2 * math.pi * v))
        return 0.0 if np.allclose(full, self.y, atol=1e-9) else -math.inf

    def extended(self, z):
        """Value, gradient and Hessian in reduced coordinates (Poisson)."""
        val, g, hd, clamped = _poisson_extended(self.y, self.lifted(z), self.noise.lam,
                                                self.eps, self.logfact)
        # A = [I; -1'], so A' diag(h) A = diag(h[:-1]) + h[-1] * 11'
        H = np.diag(hd[:-1]) + hd[-1]
        return val, g[:-1] - g[-1], H, clamped


class EdgePotential:
    """log psi over (z_parent, z_child) for the directed edge above ``child``.

    The Gaussian part (conditional density, plus the root marginal on the
    designated root edge, plus any Gaussian evidence) is held in information
    form; non-Gaussian observation terms are kept separately.
    """

    def __init__(self, factored, child, evidence, is_root_edge):
        st = factored.structure
        tr = factored.transform
        self.child = child
        self.parent = st.parent[child]
        self.dp = tr.dim(self.parent)
        self.dv = tr.dim(child)
        self.is_root_edge = is_root_edge
        Jpp, Jpv, Jvv, hp, hv = factored.edge_information(child)
        dp = self.dp
        self.J = np.empty((dp + self.dv, dp + self.dv))
        self.J[:dp, :dp] = Jpp
        self.J[:dp, dp:] = Jpv
        self.J[dp:, :dp] = Jpv.T
        self.J[dp:, dp:] = Jvv
        self.h = np.concatenate([hp, hv])
        self._factored = factored
        self._const_extra = 0.0
        self.terms = {}
        if is_root_edge:
            Jr = _pd_inv(factored.root_cov, "root block")
            self.J[:dp, :dp] += Jr
            self.h[:dp] += Jr @ factored.root_mean
            if evidence.get(self.parent) is not None:
                self.terms["parent"] = evidence[self.parent]
        if evidence.get(child) is not None:
            self.terms["child"] = evidence[child]
        # Gaussian evidence is folded in exactly
        for key, ev in list(self.terms.items()):
            if ev.gaussian:
                Je, he = ev.quadratic()
                sl = self._slice(key)
                self.J[sl, sl] += Je
                self.h[sl] += he
                r = ev.y - ev.c
                v = ev.noise.variance
                self._const_extra += -0.5 * (r @ r) / v - 0.5 * r.size * math.log(2 * math.pi * v)
                del self.terms[key]
        # flat arrays for the kernels; empty when a block has no Poisson term
        empty = np.zeros(0)
        pe, ce = self.terms.get("parent"), self.terms.get("child")
        self.p_y = pe.y if pe is not None else empty
        self.p_lf = pe.logfact if pe is not None else empty
        self.v_y = ce.y if ce is not None else empty
        self.v_lf = ce.logfact if ce is not None else empty
        any_ev = pe or ce
        self.lam = any_ev.noise.lam if any_ev is not None else 1.0
        self.eps = EPS_FRACTION * factored.N
        self.prior = np.concatenate([factored.moments.node_mean[self.parent],
                                     factored.moments.node_mean[child]])

    @cached_property
    def const(self):
        """Normalizing constant of the Gaussian part (only needed for values)."""
        f = self._factored
        b = f.offset[self.child]
        out = -0.5 * (b @ f.cond_prec[self.child] @ b) - 0.5 * _logdet2pi(f.cond_cov[self.child])
        if self.is_root_edge:
            m = f.root_mean
            out += -0.5 * (m @ _pd_inv(f.root_cov, "root block") @ m)
            out += -0.5 * _logdet2pi(f.root_cov)
        return out + self._const_extra

    def _slice(self, key):
        return slice(0, self.dp) if key == "parent" else slice(self.dp, self.dp + self.dv)

    @property
    def joint_required(self):
        """True when a non-Gaussian term touches the parent block."""
        return "parent" in self.terms

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = -0.5 * x @ self.J @ x + self.h @ x + self.const
        for key, ev in self.terms.items():
            out += ev.value(x[self._slice(key)])
        return float(out)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        g = -self.J @ x + self.h
        for key, ev in self.terms.items():
            sl = self._slice(key)
            if ev.noise.kind == "poisson":
                full = ev.lifted(x[sl])
                g[sl] += ev.A.T @ poisson_loglik(ev.y, full, ev.noise.lam)[1]
        return g


def _logdet2pi(S):
    if S.shape[0] == 0:
        return 0.0
    sign, ld = np.linalg.slogdet(2 * np.pi * S)
    return ld


def edge_potential(factored, child, y, is_root_edge=None):
    """Build the log-potential of the edge above ``child``.

    ``is_root_edge`` defaults to whether ``child`` is the first child of the root.
    """
    st = factored.structure
    if is_root_edge is None:
        is_root_edge = st.parent[child] == st.root and st.children[st.root][0] == child
    evidence = _evidence(factored, y)
    return EdgePotential(factored, child, evidence, is_root_edge)


def _evidence(factored, y):
    tr = factored.transform
    ev = {}
    for u in range(tr.node_count):
        if y.observed[u] and y.noise.kind != "exact":
            ev[u] = NodeEvidence(tr, u, y.y[u], y.noise, factored.N)
    return ev


@dataclass
class LaplaceResult:
    """Mode of the tilted edge density and the negated Hessian there.

    ``cov`` is the Laplace covariance, the inverse of ``hessian``.
    """

    mode: np.ndarray  # (z_parent, z_child)
    hessian: np.ndarray
    iterations: int
    converged: bool
    line_search_failed: bool = False
    nonpd_hessian: bool = False
    monotone: bool = True
    clamped: int = 0
    profile: bool = False

    @property
    def cov(self):
        c = np.linalg.inv(self.hessian)
        return 0.5 * (c + c.T)


def _is_pd(A):
    try:
        np.linalg.cholesky(A)
        return True
    except np.linalg.LinAlgError:
        return False


def _floor_eigenvalues(H, floor):
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    return (V * np.maximum(w, floor)) @ V.T


def laplace_project(potential, ctx_parent, ctx_child, N, options=None, start=None):
    """Laplace approximation of psi times the two contexts.

    Off the root edge only Gaussian terms involve the parent block, so it is
    eliminated in closed form and Newton runs on the child's profile; on the
    root edge both blocks are optimized jointly.  Newton iterates are
    accepted only when the objective does not decrease.
    """
    options = options or EPOptions()
    dp = potential.dp
    J = potential.J.copy()
    h = potential.h.copy()
    J[:dp, :dp] += ctx_parent.prec
    h[:dp] += ctx_parent.shift
    J[dp:, dp:] += ctx_child.prec
    h[dp:] += ctx_child.shift
    use_start = start is not None
    mode, H, it, flags, clamped = kernels.get(options.backend).laplace_edge(
        J, h, dp, potential.p_y, potential.p_lf, potential.v_y, potential.v_lf,
        float(potential.lam), float(potential.eps), float(N), potential.prior,
        start if use_start else potential.prior, use_start, potential.joint_required,
        int(options.inner_max_iters), float(options.inner_tol * max(N, 1.0)),
    )
    return LaplaceResult(
        mode=mode, hessian=H, iterations=int(it),
        converged=bool(flags & kernels.FLAG_CONVERGED),
        line_search_failed=bool(flags & kernels.FLAG_LINE_SEARCH),
        monotone=not flags & kernels.FLAG_NONMONOTONE,
        clamped=int(clamped), profile=bool(flags & kernels.FLAG_PROFILE),
    )


@dataclass
class EPState:
    """Two messages per directed edge plus sweep bookkeeping.

    ``to_parent[v]`` and ``to_child[v]`` are the messages produced by the
    potential of the edge above ``v`` for its parent and child endpoints.
    """

    to_parent: dict
    to_child: dict
    options: EPOptions
    sweeps: int = 0
    changes: list = field(default_factory=list)
    modes: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)  # node -> (precision, shift) prior magnitudes
    diagnostics: dict = field(default_factory=lambda: {
        "clips": 0, "clamped_cells": 0, "line_search_failures": 0,
        "nonpd_hessians": 0, "inner_iterations": 0, "nonmonotone": 0,
        "pruned_observations": 0,
    })


def init_state(factored, options=None):
    """Uninformative (all-zero) messages."""
    st = factored.structure
    tr = factored.transform
    to_parent = {v: EPMessage.zero(tr.dim(st.parent[v])) for v in st.order[1:]}
    to_child = {v: EPMessage.zero(tr.dim(v)) for v in st.order[1:]}
    state = EPState(to_parent, to_child, options or EPOptions())
    for u in range(tr.node_count):
        cov = factored.moments.node_cov[u]
        if cov.shape[0] == 0:
            state.scales[u] = (1.0, 1.0)
            continue
        prec = _pd_inv(cov, f"node {u} prior")
        ps = float(np.max(np.abs(prec)))
        ss = float(np.max(np.abs(prec @ factored.moments.node_mean[u])))
        state.scales[u] = (ps, max(ss, ps))
    return state


def _context(state, st, node, exclude_child=None, exclude_parent_edge=False):
    """Product of messages into ``node`` except the named edge's message."""
    prec = shift = None
    incoming = []
    if node != st.root and not exclude_parent_edge:
        incoming.append(state.to_child[node])
    for c in st.children[node]:
        if c != exclude_child:
            incoming.append(state.to_parent[c])
    for m in incoming:
        if prec is None:
            prec, shift = m.prec.copy(), m.shift.copy()
        else:
            prec += m.prec
            shift += m.shift
    if prec is None:
        return None
    return EPMessage(prec, shift)


def _clip(msg, scale):
    """Project the precision onto the PSD cone; returns number of clipped eigenvalues."""
    if msg.prec.shape[0] == 0:
        return 0
    sym = 0.5 * (msg.prec + msg.prec.T)
    if _is_pd(sym):
        msg.prec = sym
        return 0
    w, V = np.linalg.eigh(sym)
    bad = w < 0
    clipped = int(np.count_nonzero(w < -CLIP_TOL * max(scale, 1e-300)))
    if np.any(bad):
        w = np.where(bad, 0.0, w)
        msg.prec = (V * w) @ V.T
    else:
        msg.prec = 0.5 * (msg.prec + msg.prec.T)
    return clipped


def ep_update_edge(state, factored, potential, N):
    """Refresh both messages of one edge; returns the relative message change."""
    st = factored.structure
    v = potential.child
    p = potential.parent
    tr = factored.transform
    ctx_p = _context(state, st, p, exclude_child=v) or EPMessage.zero(tr.dim(p))
    ctx_v = _context(state, st, v, exclude_parent_edge=True) or EPMessage.zero(tr.dim(v))
    opts = state.options
    kern = kernels.get(opts.backend)
    dp = potential.dp
    start = state.modes.get(v)
    use_start = start is not None
    mode, H, pp, sp, pv, sv, it, flags, clamped, status = kern.edge_update(
        potential.J, potential.h, dp, ctx_p.prec, ctx_p.shift, ctx_v.prec, ctx_v.shift,
        potential.p_y, potential.p_lf, potential.v_y, potential.v_lf,
        float(potential.lam), float(potential.eps), float(N), potential.prior,
        start if use_start else potential.prior, use_start, potential.joint_required,
        int(opts.inner_max_iters), float(opts.inner_tol * max(N, 1.0)),
    )
    state.modes[v] = mode
    d = state.diagnostics
    d["inner_iterations"] += int(it)
    d["clamped_cells"] += int(clamped)
    d["line_search_failures"] += int(bool(flags & kernels.FLAG_LINE_SEARCH))
    d["nonmonotone"] += int(bool(flags & kernels.FLAG_NONMONOTONE))

    gamma = opts.damping
    out = (pp, sp, pv, sv, status)
    if status & 1:
        # Hessian not positive definite: floor its spectrum and retry
        d["nonpd_hessians"] += 1
        H = _floor_eigenvalues(H, JITTER_FLOOR * max(N, 1.0))
        out = kern.edge_messages(H, mode, dp, ctx_p.prec, ctx_p.shift,
                                 ctx_v.prec, ctx_v.shift)
    pp, sp, pv, sv, status = out
    change = 0.0
    for new, store, key, node, pd in (
        (EPMessage(pp, sp), state.to_parent, v, p, not status & 2),
        (EPMessage(pv, sv), state.to_child, v, v, not status & 4),
    ):
        old = store[key]
        if gamma < 1.0:
            new = EPMessage(gamma * new.prec + (1 - gamma) * old.prec,
                            gamma * new.shift + (1 - gamma) * old.shift)
            pd = False  # recheck after mixing
        prec_scale, shift_scale = state.scales[node]
        if not pd:
            d["clips"] += _clip(new, prec_scale)
        change = max(change, kern.message_change(new.prec, new.shift, old.prec, old.shift,
                                                 1e-6 * prec_scale, 1e-6 * shift_scale))
        store[key] = new
    return change


@dataclass
class EPResult(GaussianPosterior):
    converged: bool = True
    sweeps: int = 0
    edge_modes: dict = field(default_factory=dict)
    state: EPState = None


def _node_posteriors(state, factored):
    st = factored.structure
    tr = factored.transform
    N = factored.N
    means, covs = [], []
    nonpd = 0
    for u in range(tr.node_count):
        ctx = _context(state, st, u)
        d = tr.dim(u)
        if d == 0:
            means.append(np.zeros(0))
            covs.append(np.zeros((0, 0)))
            continue
        try:
            cov = _pd_inv(0.5 * (ctx.prec + ctx.prec.T), f"posterior at node {u}")
        except Exception:
            nonpd += 1
            w, V = np.linalg.eigh(0.5 * (ctx.prec + ctx.prec.T))
            cov = (V / np.maximum(w, 1e-9 / max(N, 1.0))) @ V.T
        means.append(cov @ ctx.shift)
        covs.append(cov)
    return means, covs, nonpd


def _single_node(factored, y, options):
    """Tree with one node: Laplace on prior times evidence."""
    tr = factored.transform
    N = factored.N
    J = _pd_inv(factored.root_cov, "root block")
    h = J @ factored.root_mean
    v_y = v_lf = np.zeros(0)
    lam = 1.0
    if y.observed[0]:
        ev = NodeEvidence(tr, 0, y.y[0], y.noise, N)
        if ev.gaussian:
            Je, he = ev.quadratic()
            J, h = J + Je, h + he
        else:
            v_y, v_lf, lam = ev.y, ev.logfact, ev.noise.lam
    x0 = np.asarray(factored.root_mean, dtype=float)
    x, H, _, _, _ = kernels.get(options.backend).laplace_edge(
        np.ascontiguousarray(J), h, 0, np.zeros(0), np.zeros(0), v_y, v_lf, float(lam),
        EPS_FRACTION * N, float(N), x0, x0, False, True,
        int(options.inner_max_iters), float(options.inner_tol * max(N, 1.0)))
    cov = _pd_inv(0.5 * (H + H.T), "posterior at node 0") if x.size else H
    return [x], [cov]


def run_ep(model, moments, y, noise=None, options=None, factored=None):
    """Approximate posterior of node counts given node observations.

    Sweeps the edges in root-first order and then in reverse until the
    largest relative message change drops below ``options.tol``.

    Returns
    -------
    EPResult
    """
    options = options or EPOptions()
    if noise is not None and noise != y.noise:
        y = type(y)(y.y, y.observed, noise)
    t0 = time.perf_counter()
    if factored is None:
        factored = factorize(moments, model)
    st = factored.structure
    tr = factored.transform
    N = factored.N

    if y.noise.kind == "exact" or not np.any(y.observed):
        post = condition_exact(factored, y if y.noise.kind != "poisson" else
                               type(y)(y.y, np.zeros_like(y.observed), NoiseModel.exact()))
        return EPResult(
            post.means, post.covs, post.full_means, post.negative,
            {"sweeps": 1, "converged": True, "wall_time": time.perf_counter() - t0,
             "changes": [0.0], "closed_form": True},
            converged=True, sweeps=1,
        )

    if len(st.order) == 1:
        means, covs = _single_node(factored, y, options)
        full = np.array([tr.lift_node(0, means[0], N)])
        return EPResult(means, covs, full, bool(np.any(full < -1e-9)),
                        {"sweeps": 1, "converged": True,
                         "wall_time": time.perf_counter() - t0, "changes": [0.0]},
                        converged=True, sweeps=1)

    evidence = _evidence(factored, y)
    first = st.children[st.root][0]
    potentials = {
        v: EdgePotential(factored, v, evidence, v == first) for v in st.order[1:]
    }
    state = init_state(factored, options)
    state.diagnostics["pruned_observations"] = sum(ev.pruned_hits for ev in evidence.values())
    schedule = list(st.order[1:])
    schedule = schedule + schedule[::-1]
    converged = False
    for sweep in range(1, options.max_sweeps + 1):
        change = 0.0
        for v in schedule:
            change = max(change, ep_update_edge(state, factored, potentials[v], N))
        state.sweeps = sweep
        state.changes.append(change)
        if change < options.tol:
            converged = True
            break

    means, covs, nonpd = _node_posteriors(state, factored)
    full = np.array([tr.lift_node(u, means[u], N) for u in range(tr.node_count)])
    diag = dict(state.diagnostics)
    diag.update({
        "sweeps": state.sweeps,
        "converged": converged,
        "changes": list(state.changes),
        "wall_time": time.perf_counter() - t0,
        "nonpd_posteriors": nonpd,
    })
    return EPResult(
        means, covs, full, bool(np.any(full < -1e-9)), diag,
        converged=converged, sweeps=state.sweeps, edge_modes=dict(state.modes), state=state,
    )
