"""Experiment configuration, multi-round runs, sweeps and CSV output."""

from __future__ import annotations

import copy
import csv
import dataclasses
import functools
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import channel as ch
from .aggregation import Federation, Strategy, run_round
from .core import HyperParams, RngSpec, derive_stream, vec_sq_norm
from .data import (LabeledDataset, load_mnist, partition_iid, partition_noniid_shards,
                   synth_gaussian_clusters, train_test_split, trim_for_shards)
from .learner import MLP, Quadratic, evaluate
from .optimizer import ActivationPlan, optimize_participation

DATA_DIR_ENV = "GOMORE_DATA_DIR"
THREADS_ENV = "GOMORE_THREADS"

SWEEP_AXES = ("power_dbm", "n_participating", "snr_threshold_db")

# Stream labels below a trial stream.
PARTITION_STREAM, INIT_STREAM, ROUND_STREAM = 0, 1, 2
# Labels below the master stream that must not depend on the trial.
DATASET_STREAM, PLACEMENT_STREAM = 1_000_001, 1_000_002


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


@dataclass
class RadioConfig:
    power_dbm: float = 20.0
    bandwidth_hz: float = 1e6
    noise_density_dbm_per_hz: float = -174.0
    ref_gain_db: float = -30.0
    pathloss_exponent: float = 2.2
    rho: float | None = 1.0
    payload_bits: float | None = None
    delay_s: float | None = None
    snr_threshold_db: float | None = None

    def constants(self) -> ch.RadioConstants:
        payload, delay, theta = self.payload_bits, self.delay_s, None
        if self.rho is not None:
            payload, delay = self.rho * self.bandwidth_hz, 1.0
        if self.snr_threshold_db is not None:
            theta = ch.db_to_linear(self.snr_threshold_db)
        return ch.RadioConstants(
            power_w=ch.dbm_to_watts(self.power_dbm),
            bandwidth_hz=self.bandwidth_hz,
            noise_density_w_per_hz=ch.dbm_to_watts(self.noise_density_dbm_per_hz),
            ref_gain=ch.db_to_linear(self.ref_gain_db),
            pathloss_exp=self.pathloss_exponent,
            snr_threshold=theta, payload_bits=payload, delay_s=delay)


@dataclass
class GeometryConfig:
    n_devices: int = 20
    near_m: float = 100.0
    far_m: float = 500.0
    placement: str = "linear"
    distances_m: list[float] | None = None
    lambdas: list[float] | None = None


@dataclass
class ModelConfig:
    family: str = "mlp"
    hidden_widths: list[int] = field(default_factory=lambda: [64])
    quadratic_dim: int = 10
    quadratic_center_scale: float = 1.0


@dataclass
class SyntheticConfig:
    n_classes: int = 10
    n_features: int = 20
    n_samples: int = 10000
    spread: float = 1.0
    test_fraction: float = 0.2


@dataclass
class DataConfig:
    source: str = "mnist"
    data_dir: str | None = None
    storage: str = "uint8"
    partition: str = "shards"
    shards_per_device: int = 2
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class SweepConfig:
    axis: str
    grid: list[float]


@dataclass
class ExperimentConfig:
    seed: int = 2023
    trials: int = 1
    strategies: list[str] = field(default_factory=lambda: ["ideal", "dds", "gomore"])
    n_participating: int | str = "auto"
    tail_rounds: int = 10
    radio: RadioConfig = field(default_factory=RadioConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: HyperParams = field(default_factory=HyperParams)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig | None = None

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"radio.power_dbm": 10})``."""
        cfg = copy.deepcopy(self)
        for path, value in changes.items():
            obj = cfg
            *parents, leaf = path.split(".")
            for name in parents:
                obj = getattr(obj, name)
            if dataclasses.is_dataclass(obj) and getattr(obj, "__dataclass_params__").frozen:
                raise ConfigError(f"{path}: use a nested replace on frozen sections")
            if not hasattr(obj, leaf):
                raise ConfigError(f"{path}: unknown field")
            setattr(obj, leaf, value)
        return validate(cfg)

    def with_training(self, **changes) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        cfg.training = dataclasses.replace(cfg.training, **changes)
        return cfg


_SECTIONS = {"radio": RadioConfig, "geometry": GeometryConfig, "model": ModelConfig,
             "data": DataConfig, "sweep": SweepConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        if name == "synthetic" and cls is DataConfig:
            value = _build(SyntheticConfig, value, f"{where}.synthetic")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = dict(raw)
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in raw and raw[name] is not None:
            kwargs[name] = _build(cls, raw.pop(name), name)
        else:
            raw.pop(name, None)
    if "training" in raw:
        kwargs["training"] = _build(HyperParams, raw.pop("training"), "training")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs.update(raw)
    return validate(ExperimentConfig(**kwargs))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return config_from_dict(raw or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def fail(path, msg):
        raise ConfigError(f"{path}: {msg}")

    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        fail("seed", f"must be a non-negative integer, got {cfg.seed!r}")
    if not isinstance(cfg.trials, int) or cfg.trials < 1:
        fail("trials", f"must be a positive integer, got {cfg.trials!r}")
    if cfg.tail_rounds < 1:
        fail("tail_rounds", "must be >= 1")
    if not cfg.strategies:
        fail("strategies", "at least one strategy is required")
    for s in cfg.strategies:
        if s not in {x.value for x in Strategy}:
            fail("strategies", f"unknown strategy {s!r}")
    g = cfg.geometry
    if g.n_devices < 1:
        fail("geometry.n_devices", "must be >= 1")
    if g.placement not in ("linear", "random"):
        fail("geometry.placement", f"must be 'linear' or 'random', got {g.placement!r}")
    if g.distances_m is not None and len(g.distances_m) != g.n_devices:
        fail("geometry.distances_m", f"expected {g.n_devices} entries, got {len(g.distances_m)}")
    if g.lambdas is not None and len(g.lambdas) != g.n_devices:
        fail("geometry.lambdas", f"expected {g.n_devices} entries, got {len(g.lambdas)}")
    if not 0 < g.near_m <= g.far_m:
        fail("geometry.near_m", "need 0 < near_m <= far_m")
    r = cfg.radio
    modes = [r.rho is not None, r.payload_bits is not None or r.delay_s is not None,
             r.snr_threshold_db is not None]
    if sum(modes) != 1:
        fail("radio", "set exactly one of rho, payload_bits+delay_s, snr_threshold_db")
    if r.rho is not None and not r.rho > 0:
        fail("radio.rho", "must be > 0")
    try:
        r.constants()
    except ValueError as exc:
        fail("radio", str(exc))
    n = cfg.n_participating
    if n == "auto":
        if r.snr_threshold_db is not None:
            fail("n_participating", "'auto' needs a rate budget (rho or payload_bits+delay_s)")
    elif not isinstance(n, int) or not 1 <= n <= g.n_devices:
        fail("n_participating", f"must be 'auto' or an integer in [1, {g.n_devices}], got {n!r}")
    m = cfg.model
    if m.family not in ("mlp", "quadratic"):
        fail("model.family", f"must be 'mlp' or 'quadratic', got {m.family!r}")
    if m.family == "mlp" and any(int(w) < 1 for w in m.hidden_widths):
        fail("model.hidden_widths", "widths must be >= 1")
    d = cfg.data
    if d.source not in ("mnist", "synthetic"):
        fail("data.source", f"must be 'mnist' or 'synthetic', got {d.source!r}")
    if d.partition not in ("iid", "shards"):
        fail("data.partition", f"must be 'iid' or 'shards', got {d.partition!r}")
    if d.shards_per_device < 1:
        fail("data.shards_per_device", "must be >= 1")
    if d.storage not in ("uint8", "float64"):
        fail("data.storage", "must be 'uint8' or 'float64'")
    if cfg.sweep is not None:
        if cfg.sweep.axis not in SWEEP_AXES:
            fail("sweep.axis", f"must be one of {SWEEP_AXES}, got {cfg.sweep.axis!r}")
        if not cfg.sweep.grid:
            fail("sweep.grid", "must be non-empty")
    return cfg


def paper_defaults() -> ExperimentConfig:
    """Paper settings where stated; power, distances, rate budget and rounds are our choices."""
    return ExperimentConfig()


# ----------------------------------------------------------------------------
# Experiment assembly


@functools.lru_cache(maxsize=4)
def _load_dataset(source: str, data_dir: str | None, storage: str, synth: tuple | None,
                  seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    if source == "mnist":
        data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
        if data_dir is None:
            raise FileNotFoundError(f"MNIST needs data.data_dir or ${DATA_DIR_ENV}")
        return load_mnist(data_dir, storage=storage)
    n_classes, n_features, n_samples, spread, test_fraction = synth
    master = RngSpec(seed)
    full = synth_gaussian_clusters(n_classes, n_features, n_samples, spread,
                                   derive_stream(master, [DATASET_STREAM, 0]))
    return train_test_split(full, test_fraction, derive_stream(master, [DATASET_STREAM, 1]))


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    s = d.synthetic
    synth = (s.n_classes, s.n_features, s.n_samples, s.spread, s.test_fraction)
    return _load_dataset(d.source, d.data_dir, d.storage, synth if d.source == "synthetic" else None,
                         cfg.seed)


def device_distances(cfg: ExperimentConfig) -> np.ndarray:
    g = cfg.geometry
    if g.distances_m is not None:
        return np.asarray(g.distances_m, dtype=np.float64)
    rng = derive_stream(RngSpec(cfg.seed), [PLACEMENT_STREAM]) if g.placement == "random" else None
    return ch.uniform_distances(g.n_devices, g.near_m, g.far_m, rng)


def device_lambdas(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.geometry.lambdas is not None:
        return np.asarray(cfg.geometry.lambdas, dtype=np.float64)
    return np.atleast_1d(ch.link_lambda(cfg.radio.constants(), device_distances(cfg)))


def plan_participation(cfg: ExperimentConfig) -> tuple[int, ActivationPlan | None]:
    if cfg.n_participating != "auto":
        return int(cfg.n_participating), None
    plan = optimize_participation(device_lambdas(cfg), cfg.radio.constants().rho)
    return plan.best_n, plan


def reception_probs(cfg: ExperimentConfig, n_active: int) -> np.ndarray:
    lams = device_lambdas(cfg)
    radio = cfg.radio.constants()
    if radio.rate_constrained:
        return np.atleast_1d(ch.error_free_prob_rate(lams, radio.rho, n_active))
    return np.exp(-lams * radio.snr_threshold / n_active)


@dataclass
class RunRecord:
    round: int
    strategy: str
    test_accuracy: float
    test_loss: float
    n_error_free: int
    divergence_sample: float
    wall_time: float


RECORD_COLUMNS = tuple(f.name for f in dataclasses.fields(RunRecord))


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    n_active: int
    probs: np.ndarray
    plan: ActivationPlan | None = None

    def final_accuracy(self, strategy: str, tail: int = 1) -> float:
        acc = [r.test_accuracy for r in self.records if r.strategy == str(strategy)]
        if not acc:
            return math.nan
        return float(np.mean(acc[-tail:]))


def _build_model(cfg: ExperimentConfig, n_features: int | None, n_classes: int | None, trial_rng: RngSpec):
    m = cfg.model
    if m.family == "quadratic":
        gen = derive_stream(trial_rng, [PARTITION_STREAM]).generator()
        centers = m.quadratic_center_scale * gen.standard_normal((cfg.geometry.n_devices, m.quadratic_dim))
        return Quadratic(centers)
    return MLP((n_features, *[int(w) for w in m.hidden_widths], n_classes))


def run_experiment(cfg: ExperimentConfig, trial: int = 0, timing: bool = True) -> ExperimentResult:
    """Algorithm-1 training loop for every configured strategy under shared randomness.

    With ``timing=False`` the wall-time column is zeroed so the output is a
    pure function of ``(cfg, trial)``.
    """
    validate(cfg)
    n_active, plan = plan_participation(cfg)
    probs = reception_probs(cfg, n_active)
    trial_rng = derive_stream(RngSpec(cfg.seed), [trial])
    K = cfg.geometry.n_devices

    if cfg.model.family == "quadratic":
        train = test = None
        partitions = None
        model = _build_model(cfg, None, None, trial_rng)
    else:
        train, test = load_datasets(cfg)
        part_rng = derive_stream(trial_rng, [PARTITION_STREAM])
        if cfg.data.partition == "iid":
            partitions = partition_iid(train, K, part_rng)
        else:
            train = trim_for_shards(train, K, cfg.data.shards_per_device)
            partitions = partition_noniid_shards(train, K, cfg.data.shards_per_device, part_rng)
        model = _build_model(cfg, train.n_features, train.n_classes, trial_rng)

    fed = Federation(model, partitions, cfg.training, probs, n_active, train)
    w0 = model.init_params(derive_stream(trial_rng, [INIT_STREAM]))
    strategies = [Strategy(s) for s in cfg.strategies]
    globals_ = {s: w0 for s in strategies}
    records: list[RunRecord] = []
    for m in range(cfg.training.rounds):
        start = time.perf_counter()
        outcome = run_round(fed, globals_, m, derive_stream(trial_rng, [ROUND_STREAM, m]))
        globals_ = dict(outcome.aggregate)
        elapsed = time.perf_counter() - start if timing else 0.0
        ref = globals_.get(Strategy.IDEAL)
        for s in strategies:
            ev = evaluate(model, globals_[s], test)
            records.append(RunRecord(
                round=m, strategy=s.value,
                test_accuracy=math.nan if ev.accuracy is None else ev.accuracy,
                test_loss=ev.mean_loss,
                n_error_free=fed.n_devices if s is Strategy.IDEAL else outcome.n_error_free,
                divergence_sample=math.nan if ref is None else vec_sq_norm(globals_[s] - ref),
                wall_time=elapsed))
    return ExperimentResult(records, n_active, probs, plan)


# ----------------------------------------------------------------------------
# Sweeps


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "power_dbm":
        return cfg.replace(**{"radio.power_dbm": float(value)})
    if axis == "n_participating":
        return cfg.replace(n_participating=int(value))
    if axis == "snr_threshold_db":
        return cfg.replace(**{"radio.snr_threshold_db": float(value), "radio.rho": None,
                              "radio.payload_bits": None, "radio.delay_s": None})
    raise ConfigError(f"sweep.axis: must be one of {SWEEP_AXES}, got {axis!r}")


SUMMARY_COLUMNS = ("axis", "value", "strategy", "n_active", "p_min", "p_max", "final_acc_mean",
                   "final_acc_std", "tail_acc_mean", "tail_acc_std", "n_trials")


def _run_point(args):
    cfg, trial = args
    return run_experiment(cfg, trial, timing=False)


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items: Sequence, n_jobs: int | None = None) -> list:
    """Ordered map; worker processes when ``n_jobs > 1``, identical results either way."""
    n_jobs = default_jobs() if n_jobs is None else n_jobs
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def sweep(cfg: ExperimentConfig, axis: str, grid: Sequence, n_jobs: int | None = None) -> list[dict]:
    """One summary row per (grid value, strategy), aggregated over ``cfg.trials`` seeds."""
    if not grid:
        raise ConfigError("sweep.grid: must be non-empty")
    points = [apply_axis(cfg, axis, v) for v in grid]
    jobs = [(p, t) for p in points for t in range(cfg.trials)]
    results = parallel_map(_run_point, jobs, n_jobs)
    rows = []
    for i, value in enumerate(grid):
        runs = results[i * cfg.trials:(i + 1) * cfg.trials]
        for s in cfg.strategies:
            final = np.array([r.final_accuracy(s) for r in runs])
            tail = np.array([r.final_accuracy(s, cfg.tail_rounds) for r in runs])
            probs = runs[0].probs
            rows.append({
                "axis": axis, "value": value, "strategy": s, "n_active": runs[0].n_active,
                "p_min": float(probs.min()), "p_max": float(probs.max()),
                "final_acc_mean": float(final.mean()),
                "final_acc_std": float(final.std(ddof=1)) if len(final) > 1 else 0.0,
                "tail_acc_mean": float(tail.mean()),
                "tail_acc_std": float(tail.std(ddof=1)) if len(tail) > 1 else 0.0,
                "n_trials": len(runs)})
    return rows


# ----------------------------------------------------------------------------
# CSV


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".9g")
    return str(value)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_text(path, text: str) -> None:
    try:
        with open(path, "w", newline="") as f:
            f.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {os.fspath(path)}: {exc.strerror or exc}") from exc


def emit_csv(records: Sequence[RunRecord], path) -> Path:
    """Write run records as CSV with a fixed column order and 9 significant digits."""
    text = rows_to_csv([dataclasses.asdict(r) for r in records], RECORD_COLUMNS)
    write_text(path, text)
    return Path(path)


def read_records(path) -> list[RunRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        out = []
        for row in reader:
            out.append(RunRecord(
                round=int(row["round"]), strategy=row["strategy"],
                test_accuracy=float(row["test_accuracy"]), test_loss=float(row["test_loss"]),
                n_error_free=int(row["n_error_free"]),
                divergence_sample=float(row["divergence_sample"]),
                wall_time=float(row["wall_time"])))
        return out
