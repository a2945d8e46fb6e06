"""Device selection and the three server-side aggregation rules.

``ideal``   full participation, error-free: plain mean over all K devices.
``dds``     drop corrupted uploads, inverse-probability weight the rest.
``gomore``  substitute the previous global model for each corrupted upload.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import HyperParams, ParamVector, RngSpec, SelectionSet, as_param_vector, derive_stream, ordered_mean
from .channel import sample_error_events
from .data import DevicePartition, LabeledDataset
from .learner import ModelSpec, local_update


class Strategy(str, enum.Enum):
    IDEAL = "ideal"
    DDS = "dds"
    GOMORE = "gomore"

    def __str__(self) -> str:
        return self.value


# Sub-stream labels under a round's RngSpec.
SELECTION_STREAM = 0
ERROR_STREAM = 1
BATCH_STREAM = 2


def select_devices(n_devices: int, n_active: int, rng: RngSpec | np.random.Generator) -> SelectionSet:
    """Uniform draw of ``n_active`` distinct devices out of ``n_devices``."""
    if not 1 <= n_active <= n_devices:
        raise ValueError(f"need 1 <= N <= K, got N={n_active}, K={n_devices}")
    gen = rng.generator() if isinstance(rng, RngSpec) else rng
    ids = gen.choice(n_devices, size=n_active, replace=False)
    return SelectionSet(tuple(sorted(int(k) for k in ids)), n_devices)


def aggregate_ideal(local_models: Sequence[ParamVector]) -> ParamVector:
    return ordered_mean(local_models)


def _check_keys(local_models: Mapping[int, ParamVector], error_free: Mapping[int, bool]):
    if set(local_models) != set(error_free):
        raise ValueError("error events must cover exactly the selected devices")


def aggregate_dds(local_models: Mapping[int, ParamVector], error_free: Mapping[int, bool],
                  probs: Mapping[int, float], n_active: int | None = None) -> ParamVector:
    """``sum_{k received} w_k / (N p_k)``; an all-lost round returns the zero vector."""
    _check_keys(local_models, error_free)
    n = len(local_models) if n_active is None else n_active
    ids = sorted(local_models)
    for k in ids:
        if not probs[k] > 0:
            raise ValueError(f"device {k} has reception probability {probs[k]}; DDS weights are undefined")
    acc = np.zeros_like(as_param_vector(local_models[ids[0]]))
    for k in ids:
        w = as_param_vector(local_models[k])
        if w.shape != acc.shape:
            raise ValueError(f"dimension mismatch: {w.shape[0]} vs {acc.shape[0]}")
        if error_free[k]:
            acc += w / (n * probs[k])
    return acc


def aggregate_gomore(local_models: Mapping[int, ParamVector], error_free: Mapping[int, bool],
                     w_prev: ParamVector, n_active: int | None = None) -> ParamVector:
    """Mean over selected devices with ``w_prev`` standing in for lost uploads."""
    _check_keys(local_models, error_free)
    n = len(local_models) if n_active is None else n_active
    w_prev = as_param_vector(w_prev)
    acc = np.zeros_like(w_prev)
    for k in sorted(local_models):
        w = as_param_vector(local_models[k]) if error_free[k] else w_prev
        if w.shape != acc.shape:
            raise ValueError(f"dimension mismatch: {w.shape[0]} vs {acc.shape[0]}")
        acc += w
    return acc / n


@dataclass
class Federation:
    """Everything a round needs besides the current global models."""

    model: ModelSpec
    partitions: Sequence[DevicePartition] | None
    hp: HyperParams
    probs: np.ndarray
    n_active: int
    data: LabeledDataset | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if not 1 <= self.n_active <= self.n_devices:
            raise ValueError(f"need 1 <= N <= K, got N={self.n_active}, K={self.n_devices}")

    @property
    def n_devices(self) -> int:
        return self.probs.shape[0]

    def train(self, w_m: ParamVector, k: int, round_rng: RngSpec) -> ParamVector:
        part = k if self.partitions is None else self.partitions[k]
        return local_update(self.model, w_m, part, self.hp,
                            derive_stream(round_rng, [BATCH_STREAM, k]), self.data)


@dataclass
class RoundOutcome:
    round: int
    selected: SelectionSet
    error_free: dict[int, bool]
    locals: dict[Strategy, dict[int, ParamVector]] = field(repr=False)
    aggregate: dict[Strategy, ParamVector] = field(repr=False)

    @property
    def n_error_free(self) -> int:
        return sum(self.error_free.values())


def run_round(fed: Federation, global_models: Mapping[Strategy, ParamVector], round_index: int,
              round_rng: RngSpec) -> RoundOutcome:
    """One broadcast/train/upload/aggregate cycle for every strategy at once.

    Selection, reception events and per-device batch streams are drawn once
    and shared by all strategies. Strategies holding bit-identical global
    models also share the trained local models.
    """
    selected = select_devices(fed.n_devices, fed.n_active, derive_stream(round_rng, [SELECTION_STREAM]))
    probs_sel = fed.probs[list(selected.device_ids)]
    error_free = sample_error_events(probs_sel, selected, derive_stream(round_rng, [ERROR_STREAM]))

    cache: list[tuple[ParamVector, dict[int, ParamVector]]] = []

    def trained(w_m: ParamVector, devices) -> dict[int, ParamVector]:
        for w_seen, done in cache:
            if w_seen is w_m or np.array_equal(w_seen, w_m):
                missing = [k for k in devices if k not in done]
                for k in missing:
                    done[k] = fed.train(w_m, k, round_rng)
                return {k: done[k] for k in devices}
        done = {k: fed.train(w_m, k, round_rng) for k in devices}
        cache.append((w_m, done))
        return dict(done)

    locals_by: dict[Strategy, dict[int, ParamVector]] = {}
    aggregate: dict[Strategy, ParamVector] = {}
    for strategy, w_m in global_models.items():
        strategy = Strategy(strategy)
        if strategy is Strategy.IDEAL:
            locs = trained(w_m, range(fed.n_devices))
            aggregate[strategy] = aggregate_ideal([locs[k] for k in range(fed.n_devices)])
        else:
            locs = trained(w_m, selected.device_ids)
            if strategy is Strategy.DDS:
                aggregate[strategy] = aggregate_dds(
                    locs, error_free, {k: fed.probs[k] for k in selected}, fed.n_active)
            else:
                aggregate[strategy] = aggregate_gomore(locs, error_free, w_m, fed.n_active)
        locals_by[strategy] = locs
    return RoundOutcome(round_index, selected, error_free, locals_by, aggregate)
