"""``kernelbank`` command line: ingest, synth, build, sweep, simulate, report.

Every command writes a ``manifest.json`` next to its outputs holding the
resolved configuration, library versions, seed and SHA-256 hashes of inputs
and outputs. Configuration precedence is command line > ``MBC_SEED`` (seed
only) > ``--config`` JSON file > built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import threading
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from pathlib import Path

import numpy as np

from . import csvio
from .bank import REUSE_EVAL_MODES, KernelBank, RunMetrics, build_bank
from .exceptions import CholeskyFailure, ConfigError, DataError, Empty, FitDegenerate, KernelBankError
from .geo import rank_trips
from .gp import FitConfig
from .mbcsim import (
    PAYLOAD_MODES,
    SCHEME_LABELS,
    SUMMARY_FIELDS,
    Transmitter,
    packet_log_csv,
    packets_to_jsonl,
    parse_scheme,
    scheme_label,
    sweep,
)
from .synth import MIXES, generate_corpus

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "MBC_SEED"
TABLE_ORDER = ("direct-hybrid", "direct", "indirect-hybrid", "indirect")

log = logging.getLogger("kernelbank")
_log_lock = threading.Lock()


class _LockedHandler(logging.StreamHandler):
    """Stream handler that never interleaves partial lines."""

    def emit(self, record):
        with _log_lock:
            super().emit(record)


@dataclass
class RunConfig:
    corpus: str | None = None
    synth_trips: int = 26
    synth_mix: str = "default"
    scheme: str = "indirect"
    hybrid: bool = True
    threshold: float = 0.5
    tw: int = 10
    horizon_cap_s: float = 10.0
    reuse_eval: str = "fixed_1s"
    n_restarts: int = 4
    max_iter: int = 200
    variance_bounds: list = field(default_factory=lambda: [1e-6, 1e3])
    lengthscale_bounds: list = field(default_factory=lambda: [0.05, 100.0])
    noise_bounds: list = field(default_factory=lambda: [1e-6, 1.0])
    seed: int = 0
    output_dir: str = "out"
    bank: str | None = None
    frozen: bool = False
    payload_mode: str = "window"
    n_jobs: int = 1
    sweep_schemes: list = field(default_factory=lambda: list(TABLE_ORDER))
    sweep_thresholds: list = field(default_factory=lambda: [0.2, 0.3, 0.4, 0.5])
    sweep_tws: list = field(default_factory=lambda: [5, 10, 20, 40])
    sweep_shuffle_seeds: list = field(default_factory=lambda: [1, 2, 3])

    def validate(self):
        if not (isinstance(self.threshold, (int, float)) and self.threshold > 0):
            raise ConfigError("threshold must be a real number > 0")
        if int(self.tw) != self.tw or self.tw < 3:
            raise ConfigError("tw must be an integer >= 3")
        if self.horizon_cap_s < 0.1:
            raise ConfigError("horizon_cap_s must be >= 0.1")
        if self.reuse_eval not in REUSE_EVAL_MODES:
            raise ConfigError(f"reuse_eval must be one of {REUSE_EVAL_MODES}")
        if self.payload_mode not in PAYLOAD_MODES:
            raise ConfigError(f"payload_mode must be one of {PAYLOAD_MODES}")
        if self.synth_mix not in MIXES:
            raise ConfigError(f"synth_mix must be one of {sorted(MIXES)}")
        if self.synth_trips < 1 or self.n_restarts < 1:
            raise ConfigError("synth_trips and n_restarts must be >= 1")
        parse_scheme(scheme_label(self.scheme, False))
        for s in self.sweep_schemes:
            parse_scheme(s)
        if any(not t > 0 for t in self.sweep_thresholds) or any(t < 3 for t in self.sweep_tws):
            raise ConfigError("sweep thresholds must be > 0 and sweep tws >= 3")
        for name in ("variance_bounds", "lengthscale_bounds", "noise_bounds"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ConfigError(f"{name} must satisfy 0 < low < high")
        return self

    def fit_config(self) -> FitConfig:
        return FitConfig(
            n_restarts=self.n_restarts,
            max_iter=self.max_iter,
            variance_bounds=tuple(self.variance_bounds),
            lengthscale_bounds=tuple(self.lengthscale_bounds),
            noise_bounds=tuple(self.noise_bounds),
            seed=self.seed,
        )


CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


def resolve_config(args, env=None) -> RunConfig:
    env = os.environ if env is None else env
    values = asdict(RunConfig())
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(data) - CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        values.update(data)
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    for name in CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    return RunConfig(**values).validate()


# ---------------------------------------------------------------- helpers


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions():
    out = {"python": platform.python_version()}
    for dist in ("kernelbank", "numpy", "scipy", "scikit-learn", "joblib"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def write_manifest(out_dir: Path, command, cfg: RunConfig, inputs, outputs):
    manifest = {
        "command": command,
        "config": asdict(cfg),
        "seed": cfg.seed,
        "versions": _versions(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8", newline="")
    return path


def _write_rows(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return _write_text(path, buf.getvalue())


def load_corpus(cfg: RunConfig):
    """Trajectories plus the files they came from."""
    if cfg.corpus is None:
        log.info("generating synthetic corpus: %d trips, seed %d", cfg.synth_trips, cfg.seed)
        return generate_corpus(cfg.synth_trips, cfg.synth_mix, cfg.seed), []
    path = Path(cfg.corpus)
    if path.is_file():
        return csvio.read_cache(path), [path]
    if path.is_dir():
        trips, warnings = csvio.load_trip_dir(path, cfg.tw)
        for w in warnings:
            log.warning(w)
        return trips, sorted(path.glob("*.csv"))
    raise DataError(f"{path}: no such corpus file or directory")


def _out_dir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_ingest(args, cfg):
    trips, warnings = csvio.load_trip_dir(args.path, cfg.tw)
    for w in warnings:
        log.warning(w)
    out = _out_dir(cfg)
    ranks = rank_trips(trips)
    cache = csvio.write_cache(trips, out / "corpus.csv")
    ranking = _write_rows(
        out / "ranking.csv",
        ("rank", "trip_id", "duration_s", "stop_count", "std_heading", "std_accel", "std_yaw", "composite_score"),
        [
            (i + 1, r.trip_id, r.duration_s, r.stop_count, r.std_heading, r.std_accel, r.std_yaw, r.composite_score)
            for i, r in enumerate(ranks)
        ],
    )
    print(f"{'rank':>4}  {'trip_id':<20} {'duration_s':>10} {'stops':>5} {'score':>8}")
    for i, r in enumerate(ranks, start=1):
        print(f"{i:>4}  {r.trip_id:<20} {r.duration_s:>10.1f} {r.stop_count:>5d} {r.composite_score:>8.3f}")
    print(f"{len(trips)} trips accepted, {len(warnings)} warnings")
    write_manifest(out, "ingest", cfg, sorted(Path(args.path).glob("*.csv")), [cache, ranking])


def cmd_synth(args, cfg):
    out = _out_dir(cfg)
    trips = generate_corpus(cfg.synth_trips, cfg.synth_mix, cfg.seed)
    files = [csvio.write_trip_csv(t, out / f"{t.trip_id}.csv") for t in trips]
    total = sum(t.duration for t in trips)
    print(f"wrote {len(files)} trips ({total:.1f} s) to {out}")
    write_manifest(out, "synth", cfg, [], files)


def cmd_build(args, cfg):
    trips, inputs = load_corpus(cfg)
    out = _out_dir(cfg)
    bank, metrics = build_bank(
        trips, cfg.scheme, cfg.hybrid, cfg.threshold, cfg.tw, cfg.horizon_cap_s, cfg.reuse_eval, cfg.fit_config()
    )
    bank_path = _write_text(out / "bank.json", bank.to_json() + "\n")
    metrics_path = _write_text(out / "metrics.csv", metrics.to_csv())
    mean_mp = float(metrics.column("persistency_s").mean())
    print(f"scheme: {scheme_label(cfg.scheme, cfg.hybrid)}  threshold: {cfg.threshold} m")
    print(f"final bank size: {len(bank)}")
    print(f"mean model persistency: {mean_mp:.3f} s")
    print(f"final generation ratio: {metrics.rows[-1]['gen_ratio']:.4f}")
    write_manifest(out, "build", cfg, inputs, [bank_path, metrics_path])


SWEEP_README = """\
persistency_vs_threshold.csv  scheme,threshold_m,mean_mp_s,updates
bank_vs_threshold.csv         scheme,threshold_m,bank_size
ratio_vs_time.csv             scheme,threshold_m,event_idx,data_time_s,bank_size,gen_ratio
shuffle_overlay.csv           scheme,shuffle_seed,event_idx,data_time_s,bank_size,gen_ratio
tw_sweep.csv                  scheme,tw,mean_mp_s,bank_size,updates
table_mp.csv                  scheme then one mean-persistency column per threshold
table_bank.csv                scheme then one bank-size column per threshold
cells.csv                     one summary row per sweep cell
"""


def _ratio_rows(results, key):
    for res in results:
        for row in res.metrics.rows:
            yield (res.summary["scheme"], key(res), row["event_idx"], row["data_time_s"], row["bank_size"], row["gen_ratio"])


def _table(results, thresholds, value):
    by = {(r.summary["scheme"], r.cell.threshold): r for r in results}
    schemes = [s for s in TABLE_ORDER if any(k[0] == s for k in by)]
    schemes += sorted({k[0] for k in by} - set(schemes))
    return [(s, *(value(by[(s, float(t))]) for t in thresholds)) for s in schemes]


def cmd_sweep(args, cfg):
    trips, inputs = load_corpus(cfg)
    out = _out_dir(cfg)
    common = dict(horizon_cap_s=cfg.horizon_cap_s, reuse_eval=cfg.reuse_eval, fit_config=cfg.fit_config(), n_jobs=cfg.n_jobs)
    log.info("threshold grid: %d schemes x %d thresholds", len(cfg.sweep_schemes), len(cfg.sweep_thresholds))
    grid = sweep(trips, cfg.sweep_schemes, cfg.sweep_thresholds, [cfg.tw], [None], **common)
    focus = scheme_label(cfg.scheme, cfg.hybrid)
    shuffle_schemes = sorted({focus, scheme_label(cfg.scheme, False)})
    log.info("shuffle overlay: seeds %s", cfg.sweep_shuffle_seeds)
    shuffles = sweep(trips, shuffle_schemes, [cfg.threshold], [cfg.tw], cfg.sweep_shuffle_seeds, **common)
    log.info("tw sweep: %s", cfg.sweep_tws)
    tw_runs = sweep(trips, [focus], [cfg.threshold], cfg.sweep_tws, [None], **common)

    thresholds = [float(t) for t in cfg.sweep_thresholds]
    files = [
        _write_rows(
            out / "persistency_vs_threshold.csv",
            ("scheme", "threshold_m", "mean_mp_s", "updates"),
            [(r.summary["scheme"], r.cell.threshold, r.summary["mean_mp_s"], r.summary["updates"]) for r in grid],
        ),
        _write_rows(
            out / "bank_vs_threshold.csv",
            ("scheme", "threshold_m", "bank_size"),
            [(r.summary["scheme"], r.cell.threshold, r.summary["bank_size"]) for r in grid],
        ),
        _write_rows(
            out / "ratio_vs_time.csv",
            ("scheme", "threshold_m", "event_idx", "data_time_s", "bank_size", "gen_ratio"),
            _ratio_rows(grid, lambda r: r.cell.threshold),
        ),
        _write_rows(
            out / "shuffle_overlay.csv",
            ("scheme", "shuffle_seed", "event_idx", "data_time_s", "bank_size", "gen_ratio"),
            _ratio_rows(shuffles, lambda r: r.cell.shuffle_seed),
        ),
        _write_rows(
            out / "tw_sweep.csv",
            ("scheme", "tw", "mean_mp_s", "bank_size", "updates"),
            [(r.summary["scheme"], r.cell.tw, r.summary["mean_mp_s"], r.summary["bank_size"], r.summary["updates"]) for r in tw_runs],
        ),
        _write_rows(
            out / "table_mp.csv", ("scheme", *thresholds), _table(grid, thresholds, lambda r: round(r.summary["mean_mp_s"], 2))
        ),
        _write_rows(out / "table_bank.csv", ("scheme", *thresholds), _table(grid, thresholds, lambda r: r.summary["bank_size"])),
        _write_rows(
            out / "cells.csv", SUMMARY_FIELDS, [[r.summary[k] for k in SUMMARY_FIELDS] for r in (*grid, *shuffles, *tw_runs)]
        ),
        _write_text(out / "README.txt", SWEEP_README),
    ]
    print("mean model persistency [s]")
    _print_table(thresholds, _table(grid, thresholds, lambda r: r.summary["mean_mp_s"]), "{:>8.2f}")
    print("kernel bank size")
    _print_table(thresholds, _table(grid, thresholds, lambda r: r.summary["bank_size"]), "{:>8d}")
    write_manifest(out, "sweep", cfg, inputs, files)


def _print_table(thresholds, rows, fmt):
    print(f"{'scheme':<18}" + "".join(f"{t:>8.1f}" for t in thresholds))
    for name, *vals in rows:
        print(f"{name:<18}" + "".join(fmt.format(v) for v in vals))


def cmd_simulate(args, cfg):
    trips, inputs = load_corpus(cfg)
    out = _out_dir(cfg)
    if cfg.bank:
        text = Path(cfg.bank).read_text(encoding="utf-8")
        bank = KernelBank.from_json(text, cfg.hybrid, cfg.threshold, cfg.tw)
        if bank.scheme.value != cfg.scheme:
            raise ConfigError(f"bank file holds a {bank.scheme.value} bank but scheme is {cfg.scheme}")
        inputs = [*inputs, Path(cfg.bank)]
    else:
        bank = KernelBank(cfg.scheme, cfg.hybrid, cfg.threshold, cfg.tw)
    if cfg.frozen and not cfg.bank:
        raise ConfigError("frozen simulation needs a bank file")
    tx = Transmitter(
        bank, cfg.threshold, cfg.horizon_cap_s, cfg.reuse_eval, cfg.fit_config(), not cfg.frozen, cfg.payload_mode
    )
    for traj in trips:
        tx.run(traj)
    metrics = tx.metrics()
    files = [
        _write_text(out / "packets.csv", packet_log_csv(tx.packets)),
        _write_text(out / "packets.jsonl", packets_to_jsonl(tx.packets)),
        _write_rows(out / "estimates.csv", ("trip_id", "t", "x_est", "y_est", "pte_m"), tx.estimates),
        _write_text(out / "channel_metrics.json", json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"),
    ]
    print(f"packets: {metrics.packets}  ({metrics.packets_per_s:.3f} /s)")
    print(f"mean inter-packet time: {metrics.mean_inter_packet_s:.3f} s")
    print(f"payload bytes: {metrics.payload_bytes_total}")
    print(f"max receiver PTE: {metrics.max_receiver_pte_m:.3f} m")
    write_manifest(out, "simulate", cfg, inputs, files)


def cmd_report(args, cfg):
    run = Path(args.run_dir)
    manifest_path = run / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"{run}: no manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    print(f"command: {manifest['command']}  seed: {manifest['seed']}")
    bad = [name for name, digest in manifest["outputs"].items() if not (run / name).is_file() or sha256_file(run / name) != digest]
    for name in sorted(manifest["outputs"]):
        print(f"  {name}: {'MODIFIED' if name in bad else 'ok'}")
    if (run / "metrics.csv").is_file():
        m = RunMetrics.from_csv((run / "metrics.csv").read_text(encoding="utf-8"))
        if len(m) == 0:
            raise Empty("metrics.csv has no rows")
        print(f"updates: {len(m)}  bank size: {m.rows[-1]['bank_size']}  mean MP: {m.column('persistency_s').mean():.3f} s")
    if (run / "channel_metrics.json").is_file():
        for k, v in json.loads((run / "channel_metrics.json").read_text(encoding="utf-8")).items():
            print(f"{k}: {v}")
    if (run / "table_mp.csv").is_file():
        print((run / "table_mp.csv").read_text(encoding="utf-8"), end="")
    if bad:
        raise DataError(f"{len(bad)} output file(s) do not match the manifest")


# ---------------------------------------------------------------- parser


def _bool_flag(parser, name, help_text):
    parser.add_argument(f"--{name.replace('_', '-')}", dest=name, action=argparse.BooleanOptionalAction, default=None, help=help_text)


def _float_list(text):
    return [float(v) for v in text.split(",") if v]


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def _add_run_options(p, sweep_opts=False):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--corpus", help="trip CSV directory or corpus.csv cache; synthetic when omitted")
    p.add_argument("--synth-trips", dest="synth_trips", type=int)
    p.add_argument("--scheme", choices=["direct", "indirect"])
    _bool_flag(p, "hybrid", "add the constant-velocity candidate")
    p.add_argument("--threshold", type=float, help="PTE threshold in metres")
    p.add_argument("--tw", type=int, help="training window length in samples")
    p.add_argument("--horizon-cap", dest="horizon_cap_s", type=float)
    p.add_argument("--reuse-eval", dest="reuse_eval", choices=REUSE_EVAL_MODES)
    p.add_argument("--restarts", dest="n_restarts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output_dir")
    if sweep_opts:
        p.add_argument("--schemes", dest="sweep_schemes", type=lambda s: s.split(","), help=",".join(SCHEME_LABELS))
        p.add_argument("--thresholds", dest="sweep_thresholds", type=_float_list)
        p.add_argument("--tws", dest="sweep_tws", type=_int_list)
        p.add_argument("--shuffle-seeds", dest="sweep_shuffle_seeds", type=_int_list)
        p.add_argument("--jobs", dest="n_jobs", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="kernelbank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate trip CSVs, rank trips, write corpus.csv")
    p.add_argument("path")
    p.add_argument("--config")
    p.add_argument("--tw", type=int)
    p.add_argument("--out", dest="output_dir")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic trip corpus as CSVs")
    p.add_argument("--config")
    p.add_argument("--n-trips", dest="synth_trips", type=int)
    p.add_argument("--mix", dest="synth_mix", choices=sorted(MIXES))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="build a kernel bank")
    _add_run_options(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("sweep", help="threshold, shuffle and tw experiment matrix")
    _add_run_options(p, sweep_opts=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="packet-level link simulation")
    _add_run_options(p)
    p.add_argument("--bank", help="bank.json to start from")
    _bool_flag(p, "frozen", "never add kernels (requires --bank)")
    p.add_argument("--payload-mode", dest="payload_mode", choices=PAYLOAD_MODES)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="summarize a run directory and verify its manifest")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = _LockedHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    log.propagate = False
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CholeskyFailure, FitDegenerate, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, Empty, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KernelBankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
