"""Wireless federated learning with global-model reuse for lost uploads."""

from .aggregation import (Federation, RoundOutcome, Strategy, aggregate_dds, aggregate_gomore,
                          aggregate_ideal, run_round, select_devices)
from .analysis import (BoundConstants, DivergenceEstimate, estimate_constants, estimate_divergence_mc,
                       theorem_gap_lower, zeta_bound_dds, zeta_bound_gomore)
from .channel import (RadioConstants, error_free_prob_direct, error_free_prob_rate, link_lambda,
                      sample_error_events)
from .core import DivergenceError, HyperParams, RngSpec, SelectionSet, derive_stream, vec_axpy, vec_sq_norm
from .optimizer import ActivationPlan, activation_objective, optimize_participation

__version__ = "0.1.0"
