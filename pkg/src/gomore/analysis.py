"""Weight-divergence bounds and their Monte-Carlo counterparts.

The divergence of a strategy is ``E||w_agg - w_ideal||^2`` for a single
round started from a common global model, where ``w_ideal`` averages the
local models of all K devices. The closed-form upper bounds below assume
stochastic gradients with ``E||g||^2 <= gamma_sq`` and parameters with
``E||w||^2 <= G_sq``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .aggregation import (ERROR_STREAM, SELECTION_STREAM, Federation, Strategy, aggregate_dds,
                          aggregate_gomore, aggregate_ideal, select_devices)
from .channel import sample_error_events
from .core import HyperParams, ParamVector, RngSpec, derive_stream, vec_sq_norm
from .data import DevicePartition, LabeledDataset
from .learner import Batch, ModelSpec, Quadratic, loss_and_grad


@dataclass(frozen=True)
class BoundConstants:
    gamma_sq: float
    G_sq: float
    eta: float
    T: int
    K: int
    N: int
    probs: Sequence[float]

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.shape != (self.K,):
            raise ValueError(f"need one probability per device ({self.K}), got {self.probs.shape}")
        if self.gamma_sq < 0 or self.G_sq < 0:
            raise ValueError("gamma_sq and G_sq must be non-negative")
        if not 1 <= self.N <= self.K:
            raise ValueError(f"need 1 <= N <= K, got N={self.N}, K={self.K}")
        if np.any((self.probs < 0) | (self.probs > 1)):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def step_scale(self) -> float:
        """``eta^2 T^2 gamma^2``, the squared worst-case local displacement."""
        return self.eta ** 2 * self.T ** 2 * self.gamma_sq

    @property
    def small_lr(self) -> bool:
        """Whether ``eta <= G / (T gamma)``."""
        return self.step_scale <= self.G_sq * (1 + 1e-12)


def _require_pair_terms(c: BoundConstants):
    if c.K < 2:
        raise ValueError(f"bounds need K >= 2, got K={c.K}")


def zeta_bound_gomore(c: BoundConstants) -> float:
    """Upper bound on the GoMORE divergence."""
    _require_pair_terms(c)
    K, N, p = c.K, c.N, c.probs
    sel = (K - N) / (N * (K - 1))
    return float(np.sum(c.step_scale / K * (sel * p ** 2 - p + 1.0)))


def zeta_bound_dds(c: BoundConstants) -> float:
    """Upper bound on the direct-discard divergence; undefined when some ``p_k = 0``."""
    _require_pair_terms(c)
    K, N, p = c.K, c.N, c.probs
    if np.any(p <= 0):
        raise ValueError("DDS bound diverges: some device has reception probability 0")
    sel = c.step_scale * (K - N) / (K * N * (K - 1))
    return float(np.sum(sel + (1.0 - p) / (K * p) * c.G_sq))


def theorem_gap_lower(c: BoundConstants) -> float:
    """Lower bound on ``zeta_bound_dds - zeta_bound_gomore`` under the small-step condition."""
    _require_pair_terms(c)
    if not c.small_lr:
        raise ValueError(
            f"gap bound requires eta <= G/(T gamma); got eta={c.eta}, T={c.T}, "
            f"gamma_sq={c.gamma_sq}, G_sq={c.G_sq}")
    K, N, p = c.K, c.N, c.probs
    if np.any(p <= 0):
        raise ValueError("gap bound diverges: some device has reception probability 0")
    sel = (K - N) / (N * (K - 1))
    return float(np.sum(c.step_scale / K * (sel * (1.0 - p ** 2) + (1.0 - p) ** 2 / p)))


@dataclass(frozen=True)
class DivergenceEstimate:
    mean: float
    std_err: float
    n_trials: int

    @classmethod
    def from_samples(cls, samples) -> "DivergenceEstimate":
        s = np.asarray(samples, dtype=np.float64)
        if s.size == 0:
            raise ValueError("no samples")
        se = float(np.std(s, ddof=1) / math.sqrt(s.size)) if s.size > 1 else 0.0
        return cls(float(np.mean(s)), se, int(s.size))


class DivergenceSamples(NamedTuple):
    gomore: np.ndarray
    dds: np.ndarray

    def estimate(self, strategy: Strategy | str) -> DivergenceEstimate:
        return DivergenceEstimate.from_samples(getattr(self, Strategy(strategy).value))

    def paired_difference(self) -> DivergenceEstimate:
        """Mean and standard error of ``dds - gomore`` trial by trial."""
        return DivergenceEstimate.from_samples(self.dds - self.gomore)


def divergence_samples(fed: Federation, w_m: ParamVector, n_trials: int, rng: RngSpec) -> DivergenceSamples:
    """Per-trial squared distances of the GoMORE and DDS aggregates to the ideal one.

    Each trial trains all K devices from ``w_m`` and then draws a selection
    and reception events. Both strategies see the same local models,
    selection and events. Trial ``t`` uses only ``derive_stream(rng, [t])``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    K, N = fed.n_devices, fed.n_active
    # Quadratic local training consumes no randomness, so its locals are trial-invariant.
    fixed = None
    if isinstance(fed.model, Quadratic):
        trial0 = derive_stream(rng, [0])
        fixed = [fed.train(w_m, k, trial0) for k in range(K)]
        fixed_ideal = aggregate_ideal(fixed)
    z1 = np.empty(n_trials)
    z2 = np.empty(n_trials)
    for t in range(n_trials):
        trial = derive_stream(rng, [t])
        if fixed is None:
            locs = [fed.train(w_m, k, trial) for k in range(K)]
            ideal = aggregate_ideal(locs)
        else:
            locs, ideal = fixed, fixed_ideal
        selected = select_devices(K, N, derive_stream(trial, [SELECTION_STREAM]))
        ids = selected.device_ids
        events = sample_error_events(fed.probs[list(ids)], selected, derive_stream(trial, [ERROR_STREAM]))
        sel_locals = {k: locs[k] for k in ids}
        w_hat = aggregate_gomore(sel_locals, events, w_m, N)
        w_tilde = aggregate_dds(sel_locals, events, {k: fed.probs[k] for k in ids}, N)
        z1[t] = vec_sq_norm(w_hat - ideal)
        z2[t] = vec_sq_norm(w_tilde - ideal)
    return DivergenceSamples(z1, z2)


def estimate_divergence_mc(strategy: Strategy | str, model: ModelSpec, partitions, probs, hp: HyperParams,
                           n_active: int, n_trials: int, rng: RngSpec, w_m: ParamVector | None = None,
                           data: LabeledDataset | None = None) -> DivergenceEstimate:
    """Monte-Carlo estimate of one strategy's single-round divergence."""
    strategy = Strategy(strategy)
    if strategy is Strategy.IDEAL:
        raise ValueError("the ideal strategy has zero divergence by definition")
    fed = Federation(model, partitions, hp, probs, n_active, data)
    if w_m is None:
        w_m = model.init_params(derive_stream(rng, [2**31]))
    return divergence_samples(fed, w_m, n_trials, rng).estimate(strategy)


class BoundConstantsEstimate(NamedTuple):
    gamma_sq: float
    G_sq: float

    @property
    def degenerate(self) -> bool:
        return self.gamma_sq == 0.0


def quadratic_constants(model: Quadratic, w0: ParamVector) -> BoundConstantsEstimate:
    """Exact constants over the convex hull of ``w0`` and the device centers.

    For steps ``0 < eta <= 1`` every local iterate and every GoMORE/ideal
    aggregate stays in that hull, and both ``||w - c_k||^2`` and ``||w||^2``
    are convex, so their suprema sit on the hull's vertices.
    """
    vertices = np.vstack([np.asarray(w0, dtype=np.float64)[None, :], model.centers])
    diffs = vertices[:, None, :] - model.centers[None, :, :]
    gamma_sq = float(np.max(np.sum(diffs * diffs, axis=2)))
    G_sq = float(np.max(np.sum(vertices * vertices, axis=1)))
    return BoundConstantsEstimate(gamma_sq, G_sq)


def estimate_constants(model: ModelSpec, partitions: Sequence[DevicePartition] | None, hp: HyperParams,
                       n_probes: int, rng: RngSpec, w0: ParamVector | None = None,
                       data: LabeledDataset | None = None,
                       safety_factor: float = 1.5) -> BoundConstantsEstimate:
    """Gradient-norm and parameter-norm bounds for the given model.

    Quadratic models get exact values (see :func:`quadratic_constants`).
    Otherwise ``n_probes`` SGD trajectories of ``hp.local_epochs`` steps are
    run from ``w0``, cycling over the devices, and the largest squared gradient and
    parameter norms seen are inflated by ``safety_factor``.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    if w0 is None:
        w0 = model.init_params(derive_stream(rng, [2**31]))
    if isinstance(model, Quadratic):
        return quadratic_constants(model, w0)
    gen = rng.generator()
    max_g = 0.0
    max_w = vec_sq_norm(w0)
    # Devices are visited round-robin so every local loss landscape is probed.
    for i in range(n_probes):
        part = partitions[i % len(partitions)]
        w = np.array(w0, dtype=np.float64)
        b = min(hp.batch_size, len(part))
        for _ in range(hp.local_epochs):
            idx = part.sample_indices[gen.choice(len(part), size=b, replace=False)]
            _, g = loss_and_grad(model, w, Batch(part.device_id, idx), data)
            max_g = max(max_g, vec_sq_norm(g))
            w -= hp.learning_rate * g
            max_w = max(max_w, vec_sq_norm(w))
    return BoundConstantsEstimate(safety_factor * max_g, safety_factor * max_w)


BOUND_COLUMNS = ("K", "N", "p_min", "p_max", "zeta1_mc", "zeta1_se", "zeta1_bound",
                 "zeta2_mc", "zeta2_se", "zeta2_bound", "gap_lower")


def bound_row(c: BoundConstants, samples: DivergenceSamples | None = None) -> dict:
    """One CSV row of the bound table; Monte-Carlo cells are blank without samples."""
    row = {"K": c.K, "N": c.N, "p_min": float(np.min(c.probs)), "p_max": float(np.max(c.probs)),
           "zeta1_mc": None, "zeta1_se": None, "zeta1_bound": zeta_bound_gomore(c),
           "zeta2_mc": None, "zeta2_se": None,
           "zeta2_bound": zeta_bound_dds(c) if np.all(c.probs > 0) else math.inf,
           "gap_lower": theorem_gap_lower(c) if c.small_lr and np.all(c.probs > 0) else None}
    if samples is not None:
        e1, e2 = samples.estimate(Strategy.GOMORE), samples.estimate(Strategy.DDS)
        row.update(zeta1_mc=e1.mean, zeta1_se=e1.std_err, zeta2_mc=e2.mean, zeta2_se=e2.std_err)
    return row
