"""Command-line entry point: ``gomore <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import channel as ch
from .aggregation import Federation
from .analysis import BOUND_COLUMNS, BoundConstants, bound_row, divergence_samples, quadratic_constants
from .core import DivergenceError, HyperParams, RngSpec, derive_stream
from .harness import (RECORD_COLUMNS, SUMMARY_COLUMNS, ConfigError, ExperimentConfig, dump_config,
                      emit_csv, load_config, paper_defaults, rows_to_csv, run_experiment, sweep,
                      write_text)
from .learner import Quadratic
from .optimizer import optimize_participation

log = logging.getLogger("gomore")


def _floats(text: str) -> list[float]:
    """Comma list ``1,2,3`` or inclusive range ``start:stop:step``."""
    text = text.strip()
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        n = int(round((stop - start) / step)) + 1
        return [start + i * step for i in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def _emit(text: str, out: str | None) -> None:
    if out:
        write_text(out, text)
    else:
        sys.stdout.write(text)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if getattr(args, "data_dir", None):
        changes["data.data_dir"] = args.data_dir
    if getattr(args, "synthetic", False):
        changes["data.source"] = "synthetic"
    if getattr(args, "partition", None):
        changes["data.partition"] = args.partition
    if getattr(args, "shards_per_device", None):
        changes["data.shards_per_device"] = args.shards_per_device
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        changes["trials"] = args.trials
    return cfg.replace(**changes) if changes else cfg


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else paper_defaults()
    return _apply_overrides(cfg, args)


def cmd_gen_config(args) -> int:
    cfg = paper_defaults()
    if args.synthetic:
        cfg = cfg.replace(**{"data.source": "synthetic"})
    header = ("# Experiment config. Power, distances, rate budget (rho) and rounds are\n"
              "# simulator defaults rather than published values; edit freely.\n")
    _emit(header + dump_config(cfg), args.out)
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    records = []
    for trial in range(cfg.trials) if args.trial is None else [args.trial]:
        res = run_experiment(cfg, trial, timing=not args.no_timing)
        log.info("trial %d: N=%d, p in [%.4f, %.4f]", trial, res.n_active, res.probs.min(), res.probs.max())
        records.extend(res.records)
    if args.out:
        emit_csv(records, args.out)
    else:
        from dataclasses import asdict
        sys.stdout.write(rows_to_csv([asdict(r) for r in records], RECORD_COLUMNS))
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    axis = args.axis or (cfg.sweep.axis if cfg.sweep else None)
    grid = _floats(args.grid) if args.grid else (cfg.sweep.grid if cfg.sweep else None)
    if axis is None or not grid:
        raise ConfigError("sweep: need --axis and --grid (or a sweep section in the config)")
    rows = sweep(cfg, axis, grid, n_jobs=args.jobs)
    _emit(rows_to_csv(rows, SUMMARY_COLUMNS), args.out)
    return 0


def _radio_from_args(args) -> ch.RadioConstants:
    return ch.RadioConstants(
        power_w=ch.dbm_to_watts(args.power_dbm), bandwidth_hz=args.bandwidth,
        noise_density_w_per_hz=ch.dbm_to_watts(args.noise_dbm_per_hz),
        ref_gain=ch.db_to_linear(args.ref_gain_db), pathloss_exp=args.pathloss_exp)


def _lambdas_from_args(args) -> np.ndarray:
    if args.lambda_list:
        lams = np.asarray(_floats(args.lambda_list))
    else:
        radio = _radio_from_args(args)
        dist = np.asarray(_floats(args.distances)) if args.distances else ch.uniform_distances(args.k)
        lams = np.atleast_1d(ch.link_lambda(radio, dist))
    if args.k is not None and lams.shape[0] != args.k:
        raise ConfigError(f"--k={args.k} but {lams.shape[0]} lambdas/distances were given")
    return lams


def _rho_from_args(args) -> float:
    if args.rho is not None:
        return args.rho
    if args.payload_bits and args.delay:
        return args.payload_bits / (args.bandwidth * args.delay)
    raise ConfigError("need --rho or both --payload-bits and --delay")


def cmd_optimize_n(args) -> int:
    lams = _lambdas_from_args(args)
    rho = _rho_from_args(args)
    if rho <= 0:
        raise ConfigError("--rho must be > 0")
    plan = optimize_participation(lams, rho)
    rows = []
    for n, value in zip(plan.n_values, plan.objective_values):
        p = np.atleast_1d(ch.error_free_prob_rate(lams, rho, int(n)))
        rows.append({"N": int(n), "objective": value, "p_min": p.min(), "p_max": p.max()})
    text = rows_to_csv(rows, ("N", "objective", "p_min", "p_max"))
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"best_n={plan.best_n}")
    return 0


def _probs_for(args, lams, n) -> np.ndarray:
    if args.probs:
        p = np.asarray(_floats(args.probs))
        return np.full(args.k, p[0]) if p.size == 1 else p
    return np.atleast_1d(ch.error_free_prob_rate(lams, _rho_from_args(args), n))


def cmd_bounds(args) -> int:
    lams = None if args.probs else _lambdas_from_args(args)
    K = args.k if args.k is not None else lams.shape[0]
    ns = [int(x) for x in _floats(args.n)] if args.n else list(range(1, K + 1))
    rows = []
    for n in ns:
        c = BoundConstants(args.gamma_sq, args.g_sq, args.eta, args.local_epochs, K, n, _probs_for(args, lams, n))
        rows.append(bound_row(c))
    _emit(rows_to_csv(rows, BOUND_COLUMNS), args.out)
    return 0


def cmd_divergence(args) -> int:
    """Monte-Carlo divergence on the quadratic model with exact bound constants."""
    if args.k is None:
        raise ConfigError("--k is required")
    K = args.k
    master = RngSpec(args.seed)
    gen = derive_stream(master, [0]).generator()
    model = Quadratic(args.center_scale * gen.standard_normal((K, args.dim)))
    w_m = np.full(args.dim, args.offset)
    hp = HyperParams(learning_rate=args.eta, local_epochs=args.local_epochs, batch_size=1, rounds=1)
    lams = None if args.probs else _lambdas_from_args(args)
    ns = [int(x) for x in _floats(args.n)] if args.n else list(range(1, K + 1))
    consts = quadratic_constants(model, w_m)
    rows = []
    for i, n in enumerate(ns):
        probs = _probs_for(args, lams, n)
        fed = Federation(model, None, hp, probs, n)
        samples = divergence_samples(fed, w_m, args.trials, derive_stream(master, [1, i]))
        c = BoundConstants(consts.gamma_sq, consts.G_sq, args.eta, args.local_epochs, K, n, probs)
        rows.append(bound_row(c, samples))
    _emit(rows_to_csv(rows, BOUND_COLUMNS), args.out)
    return 0


def _add_link_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="number of devices K")
    p.add_argument("--rho", type=float, help="spectral efficiency d/(B*tau)")
    p.add_argument("--payload-bits", type=float)
    p.add_argument("--delay", type=float, help="upload delay budget in seconds")
    p.add_argument("--bandwidth", type=float, default=1e6, help="total bandwidth in Hz")
    p.add_argument("--distances", help="comma-separated device distances in meters")
    p.add_argument("--lambda-list", help="comma-separated per-device lambda values")
    p.add_argument("--power-dbm", type=float, default=20.0)
    p.add_argument("--noise-dbm-per-hz", type=float, default=-174.0)
    p.add_argument("--ref-gain-db", type=float, default=-30.0)
    p.add_argument("--pathloss-exp", type=float, default=2.2)
    p.add_argument("--out", help="CSV output path (default: stdout)")


def _add_bound_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", help="participating-device counts (list or start:stop:step); default 1..K")
    p.add_argument("--probs", help="reception probabilities: one value for all devices or one per device")
    p.add_argument("--eta", type=float, default=0.001)
    p.add_argument("--local-epochs", type=int, default=10)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config (default: built-in defaults)")
    p.add_argument("--data-dir", help="directory with MNIST IDX files")
    p.add_argument("--synthetic", action="store_true", help="use Gaussian-cluster data instead of MNIST")
    p.add_argument("--partition", choices=("iid", "shards"))
    p.add_argument("--shards-per-device", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--out", help="CSV output path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gomore", description="Wireless federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-config", help="write a config with the default experiment settings")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_gen_config)

    p = sub.add_parser("simulate", help="run the training loop and emit per-round records")
    _add_data_args(p)
    p.add_argument("--trial", type=int, help="run only this trial index")
    p.add_argument("--no-timing", action="store_true", help="zero the wall_time column (byte-stable output)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="final accuracy across a grid of one parameter")
    _add_data_args(p)
    p.add_argument("--axis", choices=("power_dbm", "n_participating", "snr_threshold_db"))
    p.add_argument("--grid", help="values as a comma list or start:stop:step")
    p.add_argument("--jobs", type=int, help="worker processes (default: $GOMORE_THREADS or 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("optimize-n", help="exhaustive search for the number of active devices")
    _add_link_args(p)
    p.set_defaults(func=cmd_optimize_n)

    p = sub.add_parser("bounds", help="evaluate the divergence bounds over N")
    _add_link_args(p)
    _add_bound_args(p)
    p.add_argument("--gamma-sq", type=float, default=1.0)
    p.add_argument("--g-sq", type=float, default=1.0)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("divergence", help="Monte-Carlo divergence vs bounds on the quadratic model")
    _add_link_args(p)
    _add_bound_args(p)
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--offset", type=float, default=1.0, help="value of every entry of the starting model")
    p.add_argument("--center-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_divergence)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, FileNotFoundError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
