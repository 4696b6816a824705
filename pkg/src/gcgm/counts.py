"""Count vectors, observation sets and observation noise models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["CountVector", "ObservationSet", "NoiseModel"]


@dataclass(frozen=True)
class CountVector:
    """Sufficient statistics of a population.

    ``edge_counts[e]`` is indexed ``[x_u, x_v]`` for ``model.edges[e] == (u, v)``.
    Integer dtype for genuine counts; float arrays are used for posterior means.
    """

    N: int
    node_counts: np.ndarray  # (n, L)
    edge_counts: np.ndarray  # (E, L, L)

    def __eq__(self, other):
        if not isinstance(other, CountVector):
            return NotImplemented
        return (
            self.N == other.N
            and np.array_equal(self.node_counts, other.node_counts)
            and np.array_equal(self.edge_counts, other.edge_counts)
        )

    __hash__ = None


@dataclass(frozen=True)
class NoiseModel:
    """Observation noise for node counts: ``exact``, ``gaussian`` or ``poisson``."""

    kind: str
    variance: float = None
    lam: float = None

    def __post_init__(self):
        if self.kind not in ("exact", "gaussian", "poisson"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and not (self.variance is not None and self.variance > 0):
            raise ValueError("gaussian noise needs variance > 0")
        if self.kind == "poisson" and not (self.lam is not None and self.lam > 0):
            raise ValueError("poisson noise needs lam > 0")

    @classmethod
    def exact(cls):
        return cls("exact")

    @classmethod
    def gaussian(cls, variance):
        return cls("gaussian", variance=float(variance))

    @classmethod
    def poisson(cls, lam=1.0):
        return cls("poisson", lam=float(lam))

    def describe(self):
        if self.kind == "gaussian":
            return f"gaussian(variance={self.variance:g})"
        if self.kind == "poisson":
            return f"poisson(lam={self.lam:g})"
        return "exact"


@dataclass(frozen=True)
class ObservationSet:
    """Per-node observed count vectors; rows with ``observed[u] == False`` are ignored."""

    y: np.ndarray  # (n, L)
    observed: np.ndarray  # (n,) bool
    noise: NoiseModel

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 2:
            raise ValueError("y must be a (node_count, L) array")
        if np.any(y < 0):
            raise ValueError("observed counts must be nonnegative")
        if np.asarray(self.observed).shape != (y.shape[0],):
            raise ValueError("observed mask must have one flag per node")

    @classmethod
    def full(cls, y, noise):
        y = np.asarray(y)
        return cls(y, np.ones(y.shape[0], dtype=bool), noise)

    @classmethod
    def empty(cls, node_count, domain_size, noise=None):
        return cls(
            np.zeros((node_count, domain_size)),
            np.zeros(node_count, dtype=bool),
            noise if noise is not None else NoiseModel.exact(),
        )
