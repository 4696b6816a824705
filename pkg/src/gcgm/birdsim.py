"""Synthetic bird migration on a square grid.

Cell ``k`` sits at lattice point ``(k % side, k // side)``, so cell 0 is the
bottom-left corner and cell ``L - 1`` the upper-right destination.  Every
individual starts in cell 0 and moves according to a softmax over four
features of the (origin, destination) pair; observed counts are Poisson.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counts import CountVector, NoiseModel, ObservationSet
from .errors import ModelError
from .model import TreeModel, sample_population, sufficient_stats

__all__ = [
    "GridConfig",
    "Dataset",
    "cell_centers",
    "features",
    "feature_tensor",
    "transition_matrix",
    "build_chain_model",
    "generate",
    "resolve_wind",
]

N_FEATURES = 4


@dataclass(frozen=True)
class GridConfig:
    """Simulation settings.

    ``wind`` holds one unit vector per transition (``horizon - 1`` rows);
    when omitted it is drawn from ``seed``.
    """

    side: int
    horizon: int
    w: tuple = (1.0, 2.0, 2.0, 2.0)
    lam: float = 1.0
    N: int = 1000
    seed: int = 0
    wind: np.ndarray | None = None

    def __post_init__(self):
        if int(self.side) < 2:
            raise ModelError("grid side must be at least 2")
        if int(self.horizon) < 2:
            raise ModelError("horizon must be at least 2")
        if len(self.w) != N_FEATURES:
            raise ModelError("w must have 4 entries")
        if not self.lam >= 0:
            raise ModelError("lam must be nonnegative")
        if int(self.N) < 1:
            raise ModelError("N must be positive")
        object.__setattr__(self, "w", tuple(float(x) for x in self.w))
        if self.wind is not None:
            wind = np.asarray(self.wind, dtype=float)
            if wind.shape != (self.horizon - 1, 2):
                raise ModelError(f"wind must have shape ({self.horizon - 1}, 2)")
            if np.any(np.abs(np.linalg.norm(wind, axis=1) - 1.0) > 1e-9):
                raise ModelError("wind vectors must have unit norm")
            object.__setattr__(self, "wind", wind)

    @property
    def L(self):
        return self.side * self.side

    def with_w(self, w):
        return GridConfig(self.side, self.horizon, tuple(w), self.lam, self.N, self.seed,
                          resolve_wind(self))

    def to_dict(self):
        return {
            "side": int(self.side),
            "horizon": int(self.horizon),
            "w": list(self.w),
            "lam": float(self.lam),
            "N": int(self.N),
            "seed": int(self.seed),
            "wind": resolve_wind(self).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        wind = d.get("wind")
        return cls(
            side=int(d["side"]), horizon=int(d["horizon"]), w=tuple(d.get("w", (1, 2, 2, 2))),
            lam=float(d.get("lam", 1.0)), N=int(d.get("N", 1000)), seed=int(d.get("seed", 0)),
            wind=None if wind is None else np.asarray(wind, dtype=float),
        )


def _streams(seed):
    """Independent generators for wind, trajectories and observation noise."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(3)]


def resolve_wind(config):
    """Wind vectors of ``config``, drawing them from its seed if absent."""
    if config.wind is not None:
        return config.wind
    angles = _streams(config.seed)[0].uniform(0.0, 2 * np.pi, config.horizon - 1)
    return np.column_stack([np.cos(angles), np.sin(angles)])


def cell_centers(side):
    k = np.arange(side * side)
    return np.column_stack([k % side, k // side]).astype(float)


def _cosines(vec, ref):
    """Cosine between rows of ``vec`` and ``ref``; zero where either is zero."""
    nv = np.linalg.norm(vec, axis=-1)
    nr = np.linalg.norm(ref, axis=-1)
    den = nv * nr
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, np.sum(vec * ref, axis=-1) / np.where(den > 0, den, 1.0), 0.0)
    return out


def feature_tensor(config, t, wind=None):
    """(L, L, 4) features for the transition out of time step ``t`` (0-based)."""
    c = cell_centers(config.side)
    L = config.L
    wind = resolve_wind(config) if wind is None else wind
    disp = c[None, :, :] - c[:, None, :]  # [i, j] = c_j - c_i
    dest = c[-1]
    f = np.zeros((L, L, N_FEATURES))
    f[..., 0] = -np.linalg.norm(disp, axis=-1)
    to_dest = np.broadcast_to((dest - c)[:, None, :], disp.shape)
    f[..., 1] = _cosines(disp, to_dest)  # zero when i == j or i is the destination
    f[..., 2] = _cosines(disp, np.broadcast_to(wind[t], disp.shape))
    f[..., 3] = np.eye(L)
    return f


def features(i, j, t, config):
    """Feature vector of the move from cell ``i`` to cell ``j`` after step ``t``."""
    return feature_tensor(config, t)[i, j].copy()


def _softmax_rows(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def transition_matrix(config, t, feats=None):
    """Row-stochastic L x L matrix for the step from ``t`` to ``t + 1``."""
    f = feature_tensor(config, t) if feats is None else feats
    return _softmax_rows(f @ np.asarray(config.w))


def build_chain_model(config):
    """Markov chain over ``horizon`` steps started in cell 0."""
    T, L = config.horizon, config.L
    wind = resolve_wind(config)
    pots = []
    for t in range(T - 1):
        P = transition_matrix(config, t, feature_tensor(config, t, wind))
        pots.append(np.log(P))
    root = np.full(L, -np.inf)
    root[0] = 0.0
    edges = [(t, t + 1) for t in range(T - 1)]
    return TreeModel(T, L, edges, pots, root_log_potential=root, root=0)


@dataclass
class Dataset:
    """True counts and Poisson observations of one simulated migration."""

    node_counts: np.ndarray  # (T, L)
    edge_counts: np.ndarray  # (T - 1, L, L)
    y: np.ndarray  # (T, L)
    config: GridConfig
    meta: dict = field(default_factory=dict)

    @property
    def counts(self):
        return CountVector(int(self.config.N), self.node_counts, self.edge_counts)

    def observations(self, noise=None):
        return ObservationSet.full(self.y, noise or NoiseModel.poisson(self.config.lam))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        a, b = self.config.to_dict(), other.config.to_dict()
        return (a == b and np.array_equal(self.node_counts, other.node_counts)
                and np.array_equal(self.edge_counts, other.edge_counts)
                and np.array_equal(self.y, other.y))


def generate(config):
    """Simulate trajectories and Poisson counts; deterministic in ``config.seed``."""
    wind = resolve_wind(config)
    if config.wind is None:
        config = GridConfig(config.side, config.horizon, config.w, config.lam,
                            config.N, config.seed, wind)
    model = build_chain_model(config)
    _, traj_rng, obs_rng = _streams(config.seed)
    pop = sample_population(model, int(config.N), traj_rng)
    n = sufficient_stats(pop, model)
    y = obs_rng.poisson(config.lam * np.asarray(n.node_counts, dtype=float)).astype(np.int64)
    return Dataset(np.asarray(n.node_counts, dtype=np.int64),
                   np.asarray(n.edge_counts, dtype=np.int64), y, config)

