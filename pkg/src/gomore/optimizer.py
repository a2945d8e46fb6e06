"""Choosing how many devices to activate per round.

Sharing a fixed band among more devices shrinks each device's slice, so
at a fixed payload and delay budget each upload needs a higher SNR and
fails more often. The activation objective is the GoMORE divergence bound
with constant factors removed; it is minimized by enumerating N = 1..K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import MAX_RATE_EXPONENT, error_free_prob_rate, pow2m1


@dataclass(frozen=True)
class ActivationPlan:
    objective_values: np.ndarray
    best_n: int
    probs_at_best: np.ndarray

    @property
    def n_values(self) -> np.ndarray:
        return np.arange(1, len(self.objective_values) + 1)

    @property
    def interior(self) -> bool:
        return 1 < self.best_n < len(self.objective_values)


def activation_objective(lambdas, rho: float, n_active: int, n_devices: int | None = None) -> float:
    """``sum_k [(K-N)/((K-1)N) p_k^2 - p_k]`` with ``p_k`` set by the rate budget."""
    lam = np.asarray(lambdas, dtype=np.float64)
    K = lam.shape[0] if n_devices is None else n_devices
    if K < 2:
        raise ValueError(f"objective needs K >= 2, got K={K}")
    if lam.shape != (K,):
        raise ValueError(f"expected {K} lambdas, got {lam.shape}")
    if not 1 <= n_active <= K:
        raise ValueError(f"need 1 <= N <= K, got N={n_active}, K={K}")
    if rho * n_active > MAX_RATE_EXPONENT:
        x = np.where(lam == 0, 0.0, np.inf)
    else:
        x = lam * pow2m1(rho, n_active) / n_active
    sel = (K - n_active) / ((K - 1) * n_active)
    sel_minus_one = K * (1 - n_active) / ((K - 1) * n_active)
    # p*(sel*p - 1) written so both summands are <= 0; avoids cancellation when p ~ 1.
    with np.errstate(invalid="ignore"):
        p = np.exp(-x)
        terms = p * (sel * np.expm1(-x) + sel_minus_one)
    terms = np.where(np.isinf(x), 0.0, terms)
    return float(np.sum(terms))


def optimize_participation(lambdas, rho: float, n_devices: int | None = None) -> ActivationPlan:
    """Exhaustive search over N; ties go to the smaller N."""
    lam = np.asarray(lambdas, dtype=np.float64)
    K = lam.shape[0] if n_devices is None else n_devices
    if K < 1:
        raise ValueError("need at least one device")
    if K == 1:
        p1 = np.atleast_1d(error_free_prob_rate(lam, rho, 1))
        return ActivationPlan(-p1, 1, p1)
    values = np.array([activation_objective(lam, rho, n, K) for n in range(1, K + 1)])
    best = int(np.argmin(values)) + 1
    return ActivationPlan(values, best, np.atleast_1d(error_free_prob_rate(lam, rho, best)))


def predicted_best_n(plan: ActivationPlan, candidates=None) -> int:
    """Objective argmin restricted to ``candidates`` (e.g. the even N of a sweep)."""
    if candidates is None:
        return plan.best_n
    cand = sorted(int(n) for n in candidates)
    vals = [plan.objective_values[n - 1] for n in cand]
    return cand[int(np.argmin(vals))]


def predict_accuracy_curve_shape(plan: ActivationPlan) -> dict:
    """Objective-vs-N curve and the N at which accuracy is predicted to peak.

    Lower objective means smaller divergence bound, so the predicted
    accuracy curve is the objective flipped: it rises up to ``best_n`` and
    falls after it when the optimum is interior.
    """
    vals = plan.objective_values
    return {
        "n": plan.n_values.tolist(),
        "objective": vals.tolist(),
        "predicted_best_n": plan.best_n,
        "shape": "rise-then-fall" if plan.interior else
                 ("increasing" if plan.best_n == len(vals) else "decreasing"),
    }


def rho_for_target_prob(lambdas, n_active: int, target: float) -> float:
    """Smallest rho whose worst device reaches ``target`` reception probability at ``n_active``."""
    lam_max = float(np.max(lambdas))
    if not 0 < target < 1 or lam_max <= 0:
        raise ValueError("need 0 < target < 1 and a positive lambda")
    theta = -math.log(target) * n_active / lam_max
    rho = math.log2(1.0 + theta) / n_active
    if rho * n_active > MAX_RATE_EXPONENT:
        raise ValueError("target unreachable within the rate guard")
    return rho
