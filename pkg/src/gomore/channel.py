"""Uplink packet-error model for devices sharing a fixed bandwidth.

Each selected device gets ``B / N`` hertz and transmits at a fixed rate.
Under Rayleigh fading the upload is received intact with probability
``exp(-lambda_k * theta / N)``, where ``theta`` is the decoding SNR
threshold and ``lambda_k`` collects the link budget. Fading is never
sampled directly; only the resulting Bernoulli reception events are.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import RngSpec, SelectionSet

# Above this the 2**(rho*N) term overflows long before exp() would matter.
MAX_RATE_EXPONENT = 1000.0


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class RadioConstants:
    """Shared radio parameters, all in SI units with linear gains."""

    power_w: float = 0.1
    bandwidth_hz: float = 1e6
    noise_density_w_per_hz: float = dbm_to_watts(-174.0)
    ref_gain: float = 1e-3
    pathloss_exp: float = 2.2
    snr_threshold: float | None = None
    payload_bits: float | None = None
    delay_s: float | None = None

    def __post_init__(self):
        for name in ("power_w", "bandwidth_hz", "noise_density_w_per_hz", "ref_gain", "pathloss_exp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.snr_threshold is not None and not self.snr_threshold > 0:
            raise ValueError(f"snr_threshold must be > 0, got {self.snr_threshold}")
        for name in ("payload_bits", "delay_s"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be > 0, got {value}")
        if (self.payload_bits is None) != (self.delay_s is None):
            raise ValueError("payload_bits and delay_s must be given together")

    @property
    def rate_constrained(self) -> bool:
        return self.payload_bits is not None

    @property
    def rho(self) -> float:
        """Spectral efficiency needed to deliver the payload within the delay budget."""
        if not self.rate_constrained:
            raise ValueError("rho requires payload_bits and delay_s")
        return self.payload_bits / (self.bandwidth_hz * self.delay_s)


@dataclass(frozen=True)
class DeviceLink:
    distance_m: float
    lam: float


def link_lambda(radio: RadioConstants, distance_m):
    """``B*N0 / (2*P*h0^2*d^-alpha)``; accepts scalars or arrays of distances."""
    d = np.asarray(distance_m, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("device distances must be > 0")
    path_gain = radio.ref_gain * d ** (-radio.pathloss_exp)
    lam = radio.bandwidth_hz * radio.noise_density_w_per_hz / (2.0 * radio.power_w * path_gain)
    return float(lam) if lam.ndim == 0 else lam


def make_links(radio: RadioConstants, distances: Sequence[float]) -> list[DeviceLink]:
    lams = np.atleast_1d(link_lambda(radio, distances))
    return [DeviceLink(float(d), float(lam)) for d, lam in zip(distances, lams)]


def uniform_distances(n_devices: int, near_m: float = 100.0, far_m: float = 500.0,
                      rng: RngSpec | None = None) -> np.ndarray:
    """Evenly spaced distances, or seeded uniform placement when ``rng`` is given."""
    if n_devices < 1:
        raise ValueError("need at least one device")
    if rng is None:
        return np.linspace(near_m, far_m, n_devices)
    return np.sort(rng.generator().uniform(near_m, far_m, n_devices))


def error_free_prob_direct(radio: RadioConstants, distance_m, n_active: int, theta: float):
    """Reception probability at a directly chosen SNR threshold ``theta``."""
    if n_active < 1:
        raise ValueError(f"n_active must be >= 1, got {n_active}")
    if theta < 0:
        raise ValueError(f"theta must be >= 0, got {theta}")
    lam = link_lambda(radio, distance_m)
    return np.exp(-lam * theta / n_active)


def _two_product(a: float, n: int) -> tuple[float, float]:
    """``a*n`` as ``hi + lo`` with no rounding loss (Dekker split; ``n`` is a small integer)."""
    hi = a * n
    c = 134217729.0 * a  # 2**27 + 1
    a_hi = c - (c - a)
    a_lo = a - a_hi
    lo = (a_hi * n - hi) + a_lo * n
    return hi, lo


def pow2m1(rho: float, n_active: int) -> float:
    """``2**(rho*N) - 1``, the SNR threshold for spectral efficiency ``rho*N``.

    The exponent is large enough in practice that rounding ``rho*N`` alone
    would cost several digits, so the product is carried exactly.
    """
    hi, lo = _two_product(float(rho), int(n_active))
    if hi < 1.0:
        return math.expm1((hi + lo) * math.log(2.0))
    return float(np.exp2(hi)) * (1.0 + lo * math.log(2.0)) - 1.0


def error_free_prob_rate(lam, rho: float, n_active: int):
    """Reception probability when the rate is fixed by payload size and delay.

    ``exp(-lam * (2**(rho*N) - 1) / N)``. Returns 0 once ``rho*N`` exceeds
    ``MAX_RATE_EXPONENT``.
    """
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(lam_arr < 0):
        raise ValueError("lambda must be >= 0")
    if not rho > 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    if n_active < 1:
        raise ValueError(f"n_active must be >= 1, got {n_active}")
    if rho * n_active > MAX_RATE_EXPONENT:
        p = np.where(lam_arr == 0, 1.0, 0.0)
    else:
        p = np.exp(-lam_arr * pow2m1(rho, n_active) / n_active)
    return float(p) if p.ndim == 0 else p


def threshold_for_rate(rho: float, n_active: int) -> float:
    """SNR threshold equivalent to spectral efficiency ``rho*N`` on a ``B/N`` slice."""
    return pow2m1(rho, n_active)


def device_probs(radio: RadioConstants, distances, n_active: int) -> np.ndarray:
    """Per-device reception probabilities for ``n_active`` sharing the band."""
    lams = np.atleast_1d(link_lambda(radio, distances))
    if radio.rate_constrained:
        return np.atleast_1d(error_free_prob_rate(lams, radio.rho, n_active))
    if radio.snr_threshold is None:
        raise ValueError("radio needs either snr_threshold or payload_bits/delay_s")
    return np.exp(-lams * radio.snr_threshold / n_active)


def sample_error_events(probs, selected: SelectionSet, rng: RngSpec | np.random.Generator) -> dict[int, bool]:
    """Draw one reception outcome per selected device (True = received intact).

    ``probs`` is either aligned with ``selected`` or a mapping keyed by device id.
    """
    ids = selected.device_ids
    if isinstance(probs, Mapping):
        p = np.array([probs[k] for k in ids], dtype=np.float64)
    else:
        p = np.asarray(probs, dtype=np.float64)
        if p.shape != (len(ids),):
            raise ValueError(f"expected {len(ids)} probabilities, got shape {p.shape}")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError(f"probabilities must lie in [0, 1], got {p}")
    gen = rng.generator() if isinstance(rng, RngSpec) else rng
    u = gen.random(len(ids))
    return {k: bool(ok) for k, ok in zip(ids, u < p)}
