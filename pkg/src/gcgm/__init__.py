"""Gaussian approximation of collective graphical models on trees.

Exact tree marginals and the count distribution (``model``, ``cgm``),
the moment-matched Gaussian in reduced coordinates (``gaussian``), EP with
Laplace projections for Poisson-observed counts (``ep``), a bird-migration
simulator (``birdsim``) and EM learning of its transition model (``learn``).
"""
__version__ = "0.1.0"

from .counts import CountVector, NoiseModel, ObservationSet
from .model import (
    MarginalSet,
    Population,
    TreeModel,
    compute_marginals,
    log_prob_individual,
    sample_population,
    sufficient_stats,
    validate_tree,
)
from .cgm import (
    enumerate_posterior,
    iter_support,
    log_base_measure,
    log_pmf,
    log_pmf_reparam,
    sample_posterior_baseline,
)
from .gaussian import (
    ReductionTransform,
    build_moments,
    clique_transform,
    condition_exact,
    edge_posterior,
    factorize,
    lift_counts,
    precision_pattern,
    reduce_counts,
)
from .ep import EPOptions, run_ep
from .kernels import BACKEND

__all__ = [
    "BACKEND",
    "CountVector",
    "EPOptions",
    "MarginalSet",
    "NoiseModel",
    "ObservationSet",
    "Population",
    "ReductionTransform",
    "TreeModel",
    "build_moments",
    "clique_transform",
    "compute_marginals",
    "condition_exact",
    "edge_posterior",
    "enumerate_posterior",
    "factorize",
    "iter_support",
    "lift_counts",
    "log_base_measure",
    "log_pmf",
    "log_pmf_reparam",
    "log_prob_individual",
    "precision_pattern",
    "reduce_counts",
    "run_ep",
    "sample_population",
    "sample_posterior_baseline",
    "sufficient_stats",
    "validate_tree",
]
