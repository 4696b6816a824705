"""EM estimation of the transition coefficients of the migration chain.

The E-step runs the Gaussian approximation with EP for the node counts and
recovers expected edge counts from the node posteriors; the M-step fits a
weighted softmax regression to those expected transitions.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .birdsim import build_chain_model, feature_tensor, resolve_wind
from .errors import NonFinite
from .ep import EPOptions, run_ep
from .gaussian import build_moments, edge_posterior, factorize
from .model import compute_marginals

__all__ = [
    "EMConfig",
    "EMTrace",
    "EStepResult",
    "NotConvergedWarning",
    "e_step",
    "m_step",
    "mstep_objective",
    "floor_weights",
    "run_em",
    "relative_error",
]


class NotConvergedWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class EMConfig:
    init_w: tuple = (0.2, 0.4, 0.4, 0.4)
    max_em_iters: int = 50
    mstep_tol: float = 1e-6
    mstep_max_iters: int = 500
    tol: float = 1e-4  # stop once the largest coefficient change is below this
    ep: EPOptions = field(default_factory=EPOptions)
    true_w: tuple | None = None

    def __post_init__(self):
        if self.max_em_iters < 1 or self.mstep_max_iters < 1:
            raise ValueError("iteration counts must be positive")
        if len(self.init_w) != 4:
            raise ValueError("init_w must have 4 entries")


@dataclass
class EMTrace:
    w: list = field(default_factory=list)
    rel_error: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.w)

    @property
    def final_w(self):
        return self.w[-1]

    def rows(self):
        for k in range(len(self.w)):
            yield (k, *self.w[k], self.rel_error[k], self.objective[k], self.seconds[k])


def relative_error(w, w_true):
    w_true = np.asarray(w_true, dtype=float)
    return float(np.abs(np.asarray(w, dtype=float) - w_true).sum() / np.abs(w_true).sum())


@dataclass
class EStepResult:
    node_means: np.ndarray  # (T, L)
    edge_means: np.ndarray  # (T - 1, L, L)
    diagnostics: dict


def e_step(w, dataset, options=None, observations=None):
    """Expected node and edge counts under the chain with coefficients ``w``.

    ``observations`` defaults to the dataset's Poisson counts.
    """
    config = dataset.config.with_w(w)
    N = float(config.N)
    model = build_chain_model(config)
    marg = compute_marginals(model)
    moments = build_moments(model, marg, N)
    factored = factorize(moments, model)
    y = observations if observations is not None else dataset.observations()
    post = run_ep(model, moments, y, options=options or EPOptions(), factored=factored)
    edges = np.array([
        edge_posterior(moments, e, np.concatenate([post.means[u], post.means[v]]))
        for e, (u, v) in enumerate(model.edges)
    ])
    diag = dict(post.diagnostics)
    if not diag.get("converged", True):
        warnings.warn("EP did not converge in the E-step", NotConvergedWarning)
    return EStepResult(np.asarray(post.full_means), edges, diag)


def floor_weights(weights):
    """Clip negative expected counts at 0 and restore each row's mass."""
    W = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(W)):
        raise NonFinite("expected edge counts contain NaN or Inf")
    mass = W.sum(axis=-1, keepdims=True)
    Wp = np.maximum(W, 0.0)
    pos = Wp.sum(axis=-1, keepdims=True)
    scale = np.where(pos > 0, np.maximum(mass, 0.0) / np.where(pos > 0, pos, 1.0), 0.0)
    return Wp * scale


def _feature_stack(config):
    wind = resolve_wind(config)
    return np.array([feature_tensor(config, t, wind) for t in range(config.horizon - 1)])


def mstep_objective(w, weights, feats):
    """Expected complete log-likelihood of the transitions, with its gradient and Hessian.

    ``weights`` is (T-1, L, L); ``feats`` is (T-1, L, L, 4).
    """
    s = feats @ w
    lse = logsumexp(s, axis=-1)
    p = np.exp(s - lse[..., None])
    mass = weights.sum(axis=-1)
    value = float(np.sum(weights * s) - np.sum(mass * lse))
    ef = np.einsum("tij,tijk->tik", p, feats)
    grad = np.einsum("tij,tijk->k", weights, feats) - np.einsum("ti,tik->k", mass, ef)
    second = np.einsum("tij,tijk,tijl->tikl", p, feats, feats) - ef[..., :, None] * ef[..., None, :]
    hess = -np.einsum("ti,tikl->kl", mass, second)
    return value, grad, hess


def m_step(edge_counts, config, w0=None, tol=1e-6, max_iters=500, trace=None):
    """Maximize the weighted softmax log-likelihood over ``w``.

    Newton ascent with backtracking; stops when the gradient's largest entry
    is below ``tol``.  ``trace``, if a list, receives the objective per iterate.
    """
    W = floor_weights(edge_counts)
    feats = _feature_stack(config)
    w = np.array(config.w if w0 is None else w0, dtype=float)
    f, g, H = mstep_objective(w, W, feats)
    if trace is not None:
        trace.append(f)
    for _ in range(max_iters):
        if np.max(np.abs(g)) < tol:
            break
        A = -H
        # ridge only shapes the direction; acceptance is decided on the objective
        ridge = 1e-10 * max(np.trace(A), 1.0)
        try:
            step = np.linalg.solve(A + ridge * np.eye(A.shape[0]), g)
        except np.linalg.LinAlgError:
            step = g
        if g @ step <= 0:
            step = g
        t = 1.0
        while t > 1e-12:
            w_new = w + t * step
            f_new, g_new, H_new = mstep_objective(w_new, W, feats)
            if f_new >= f + 1e-4 * t * (g @ step):
                break
            t *= 0.5
        else:
            break
        assert f_new >= f, "M-step objective decreased"
        w, f, g, H = w_new, f_new, g_new, H_new
        if trace is not None:
            trace.append(f)
    return w, f


def run_em(dataset, em_config=None, observations=None, callback=None):
    """Alternate E- and M-steps from ``em_config.init_w``.

    Row 0 of the trace is the initial point; each later row holds the
    coefficients after one M-step and the surrogate objective they reach.
    """
    cfg = em_config or EMConfig()
    trace = EMTrace()
    w = np.array(cfg.init_w, dtype=float)
    rel = (lambda v: relative_error(v, cfg.true_w)) if cfg.true_w is not None else (lambda v: float("nan"))
    t0 = time.perf_counter()
    trace.w.append(tuple(w))
    trace.rel_error.append(rel(w))
    trace.objective.append(float("nan"))
    trace.seconds.append(0.0)
    for it in range(1, cfg.max_em_iters + 1):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            es = e_step(w, dataset, cfg.ep, observations)
        for c in caught:
            trace.warnings.append((it, str(c.message)))
        w_new, obj = m_step(es.edge_means, dataset.config, w0=w,
                            tol=cfg.mstep_tol, max_iters=cfg.mstep_max_iters)
        delta = float(np.max(np.abs(w_new - w)))
        w = w_new
        trace.w.append(tuple(float(x) for x in w))
        trace.rel_error.append(rel(w))
        trace.objective.append(float(obj))
        trace.seconds.append(time.perf_counter() - t0)
        if callback is not None:
            callback(it, trace)
        if delta < cfg.tol:
            break
    return trace
