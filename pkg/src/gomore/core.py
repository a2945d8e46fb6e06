"""Shared value types, vector helpers and seeded RNG streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Flat float64 parameter vector. Every aggregation rule works on these.
ParamVector = np.ndarray


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite parameters or losses."""


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.001
    local_epochs: int = 10
    batch_size: int = 50
    rounds: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")


@dataclass(frozen=True)
class SelectionSet:
    """Devices chosen for one round, kept in ascending id order."""

    device_ids: tuple[int, ...]
    n_devices: int

    def __post_init__(self):
        ids = self.device_ids
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate device ids in selection {ids}")
        if any(k < 0 or k >= self.n_devices for k in ids):
            raise ValueError(f"device id out of range [0, {self.n_devices}) in {ids}")
        if list(ids) != sorted(ids):
            object.__setattr__(self, "device_ids", tuple(sorted(ids)))

    def __len__(self) -> int:
        return len(self.device_ids)

    def __iter__(self):
        return iter(self.device_ids)

    def __contains__(self, k) -> bool:
        return k in self.device_ids


@dataclass(frozen=True)
class RngSpec:
    """A named random stream: a master seed plus a path of integer labels.

    Two specs with equal fields produce bit-identical sequences on any
    platform; specs differing in any label are statistically independent.
    """

    master_seed: int
    labels: tuple[int, ...] = field(default=())

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.master_seed, spawn_key=self.labels)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))


def derive_stream(master: RngSpec, labels: Sequence[int]) -> RngSpec:
    """Return the child stream of ``master`` addressed by ``labels``.

    Derivation hashes the full label path (SeedSequence spawn keys), so
    streams can be created in any order, in any process, without
    coordination.
    """
    labels = tuple(int(x) for x in labels)
    if not labels:
        raise ValueError("derive_stream needs at least one label")
    if any(x < 0 for x in labels):
        raise ValueError(f"stream labels must be non-negative, got {labels}")
    return RngSpec(master.master_seed, master.labels + labels)


def as_param_vector(x) -> ParamVector:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"parameter vector must be 1-D, got shape {v.shape}")
    return v


def vec_axpy(a: float, x, y) -> ParamVector:
    """Return ``a * x + y`` as a new vector."""
    x = as_param_vector(x)
    y = as_param_vector(y)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    return a * x + y


def vec_sq_norm(x) -> float:
    x = as_param_vector(x)
    return float(np.dot(x, x))


def ordered_mean(vectors: Sequence[ParamVector]) -> ParamVector:
    """Mean of equal-length vectors, accumulated strictly in list order."""
    if len(vectors) == 0:
        raise ValueError("cannot average an empty list of vectors")
    acc = np.zeros_like(as_param_vector(vectors[0]))
    for v in vectors:
        v = as_param_vector(v)
        if v.shape != acc.shape:
            raise ValueError(f"dimension mismatch: {v.shape[0]} vs {acc.shape[0]}")
        acc += v
    return acc / len(vectors)
