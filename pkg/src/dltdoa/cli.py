"""Command-line entry point.

Subcommands: gen-corpus, train-nlos, train-rnn, run, compare. Every
subcommand is non-interactive and exits with 0 on success, 2 on a
configuration error, 3 on a data error and 4 on a numerical failure,
printing a single-line diagnostic to stderr. ``TDOA_LOG`` sets the log
level (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dltdoa")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _seed(value: str) -> int:
    s = int(value)
    if not 0 <= s < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return s


def _scenario(spec: str | None):
    from .scenario import PRESETS, load_scenario, preset

    if spec is None:
        return preset("los_walk")
    if spec in PRESETS:
        return preset(spec)
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"scenario {spec!r} is neither a preset nor a readable file")
    try:
        return load_scenario(path)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid scenario file {spec}: {exc}") from None


def _metrics_path(out: Path) -> Path:
    return out.with_name(out.name + ".metrics.json")


# --- gen-corpus ---------------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    from .channel import generate_corpus, write_cir_csv
    from .rnn import SequenceDatasetConfig, build_sequence_dataset

    sc = _scenario(args.scenario)
    out = Path(args.out)
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        if args.kind == "cir":
            n = write_cir_csv(out, generate_corpus(sc.cluster, args.count, args.seed))
            print(f"wrote {n} CIR frames to {out}")
        else:
            ds = build_sequence_dataset(sc.cluster, SequenceDatasetConfig(n_trajectories=args.count, seed=args.seed))
            with open(out, "wb") as fh:
                np.savez(fh, features=ds.features, targets=ds.targets, current=ds.current)
            print(f"wrote {len(ds)} feature windows to {out}")
    except OSError as exc:
        raise ConfigError(f"cannot write {out}: {exc.strerror or exc}") from None
    return EXIT_OK


# --- train-nlos ---------------------------------------------------------------------------------


def cmd_train_nlos(args) -> int:
    from .channel import LinkState, read_cir_csv
    from .ecir import ecir_matrix
    from .nlos import TrainConfig, build_classifier, save_classifier, train

    if not Path(args.corpus).is_file():
        raise ConfigError(f"corpus {args.corpus} not found")
    try:
        rows = read_cir_csv(args.corpus)
    except (KeyError, ValueError, IndexError) as exc:
        raise DataError(f"malformed corpus {args.corpus}: {exc}") from None
    if not rows:
        raise DataError(f"corpus {args.corpus} is empty")
    frames = [f for _, f in rows]
    x = ecir_matrix(frames)
    y = np.array([f.label is LinkState.NLOS for f in frames], dtype=float)
    if len(np.unique(y)) < 2:
        raise DataError("corpus must contain both LOS and NLOS frames")
    net = build_classifier(args.seed)
    net, report = train(x, y, TrainConfig(epochs=args.epochs, seed=args.seed), net)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(out, net, trained=report.epochs_run > 0, extra={"seed": args.seed})
    _write_json(_metrics_path(out), report.as_dict())
    print(f"validation accuracy {report.val_accuracy:.4f} after {report.epochs_run} epochs")
    return EXIT_OK


# --- train-rnn ----------------------------------------------------------------------------------


def _load_sequence_corpus(path: str):
    from .rnn import SequenceDataset

    if not Path(path).is_file():
        raise ConfigError(f"corpus {path} not found")
    try:
        with np.load(path) as z:
            ds = SequenceDataset(z["features"], z["targets"], z["current"] if "current" in z else None)
    except (KeyError, ValueError, OSError) as exc:
        raise DataError(f"malformed sequence corpus {path}: {exc}") from None
    if ds.features.ndim != 3 or ds.targets.ndim != 3 or len(ds.features) != len(ds.targets):
        raise DataError(f"malformed sequence corpus {path}: inconsistent array shapes")
    return ds


def cmd_train_rnn(args) -> int:
    from .nlos import NlosPredictor
    from .rnn import PredictorTrainConfig, RnnPredictor, build_predictor, train_predictor
    from .training import ClosedLoopConfig, train_closed_loop

    sc = _scenario(args.scenario)
    cluster = sc.cluster
    r = cluster.region
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.nlos_model and args.epochs > 0:
        if args.corpus:
            raise ConfigError("--corpus and --nlos-model are mutually exclusive")
        if not Path(args.nlos_model).is_file():
            raise ConfigError(f"NLOS model {args.nlos_model} not found")
        nlos = NlosPredictor.from_checkpoint(args.nlos_model)
        rounds = args.rounds
        warm = max(1, args.epochs - rounds * max(1, args.epochs // (rounds + 1)))
        per_round = (args.epochs - warm) // rounds if rounds else 0
        cfg = ClosedLoopConfig(n_trajectories=args.trajectories, warmup_epochs=warm, rounds=rounds if per_round else 0,
                               epochs_per_round=per_round, seed=args.seed)
        predictor, report = train_closed_loop(cluster, nlos, cfg)
        metrics = report.as_dict()
    else:
        if args.corpus:
            ds = _load_sequence_corpus(args.corpus)
        else:
            from .rnn import SequenceDatasetConfig, build_sequence_dataset

            ds = build_sequence_dataset(cluster, SequenceDatasetConfig(n_trajectories=args.trajectories, seed=args.seed))
        if ds.features.shape[-1] != cluster.size - 1 + 6:
            raise DataError("corpus feature width does not match the anchor cluster")
        predictor = RnnPredictor(build_predictor(cluster.size - 1, ds.targets.shape[1], seed=args.seed),
                                 cluster.positions, bounds=(r.x0, r.y0, r.x1, r.y1))
        predictor, rep = train_predictor(ds, cluster.positions, PredictorTrainConfig(epochs=args.epochs, seed=args.seed),
                                         predictor)
        metrics = rep.as_dict()
    predictor.save(out, extra={"seed": args.seed})
    _write_json(_metrics_path(out), metrics)
    print(f"validation RMSE {metrics['val_rmse_m']:.4f} m after {metrics['epochs_run']} epochs")
    return EXIT_OK


# --- run ----------------------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    scenario: str | None
    variant: str
    nlos_model: str | None
    rnn_model: str | None
    seed: int | None
    out_dir: str

    @classmethod
    def from_sources(cls, args) -> list["RunConfig"]:
        cfg: dict = {}
        if args.config:
            try:
                with open(args.config) as fh:
                    cfg = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
            if not isinstance(cfg, dict):
                raise ConfigError("run config must be a JSON object")
        base = Path(args.config).parent if args.config else Path(".")

        def pick(key: str, flag):
            if flag is not None:
                return flag
            v = cfg.get(key)
            if isinstance(v, str) and key in ("nlos_model", "rnn_model", "out_dir") and not Path(v).is_absolute():
                return str(base / v)
            if key == "scenario" and isinstance(v, str) and (base / v).is_file():
                return str(base / v)
            return v

        variants = args.variant or cfg.get("variant") or cfg.get("variants") or "proposed"
        if isinstance(variants, str):
            variants = [variants]
        out_dir = pick("out_dir", args.out) or "runs"
        seed = pick("seed", args.seed)
        if seed is not None and not (isinstance(seed, int) and 0 <= seed < 2**64):
            raise ConfigError("seed must be a 64-bit unsigned integer")
        runs = []
        for v in variants:
            if v not in ("proposed", "baseline_static_ls", "baseline_kf"):
                raise ConfigError(f"unknown variant {v!r}")
            rc = cls(pick("scenario", args.scenario), v, pick("nlos_model", args.nlos_model),
                     pick("rnn_model", args.rnn_model), seed,
                     str(Path(out_dir) / v) if len(variants) > 1 else out_dir)
            rc.validate()
            runs.append(rc)
        return runs

    def validate(self) -> None:
        if self.variant == "proposed":
            for name, path in (("nlos_model", self.nlos_model), ("rnn_model", self.rnn_model)):
                if not path:
                    raise ConfigError(f"the proposed variant needs {name}")
                if not Path(path).is_file():
                    raise ConfigError(f"{name} checkpoint {path} not found")


def _execute(rc: RunConfig) -> dict:
    from .nlos import NlosPredictor
    from .pipeline import Models, run
    from .rnn import RnnPredictor

    sc = _scenario(rc.scenario)
    models = Models()
    if rc.variant == "proposed":
        models = Models(NlosPredictor.from_checkpoint(rc.nlos_model), RnnPredictor.load(rc.rnn_model))
    metrics = run(sc, rc.variant, models, seed=rc.seed)
    metrics.write(rc.out_dir)
    return metrics.summary()


def cmd_run(args) -> int:
    runs = RunConfig.from_sources(args)
    if args.jobs > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(runs))) as pool:
            summaries = list(pool.map(_execute, runs))
    else:
        summaries = [_execute(rc) for rc in runs]
    for s in summaries:
        print(f"{s['variant']}: mean error {s['mean_error_cm']:.2f} cm, RMSE {s['rmse_m']:.4f} m, "
              f"current {s['mean_current_mA']:.2f} mA, rounds {s['ranging_rounds']}")
    return EXIT_OK


# --- compare ------------------------------------------------------------------------------------


def cmd_compare(args) -> int:
    from .pipeline import ScenarioMismatchError, compare_summaries

    if len(args.runs) < 2:
        raise ConfigError("compare needs at least two run directories")
    summaries = []
    for d in args.runs:
        p = Path(d) / "summary.json" if Path(d).is_dir() else Path(d)
        if not p.is_file():
            raise ConfigError(f"no run summary at {p}")
        try:
            with open(p) as fh:
                summaries.append(json.load(fh))
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed summary {p}: {exc}") from None
    try:
        rows = compare_summaries(summaries)
    except ScenarioMismatchError as exc:
        raise ConfigError(str(exc)) from None
    except KeyError as exc:
        raise DataError(f"summary lacks field {exc}") from None
    table = [r.as_dict() for r in rows]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "comparison.json", table)
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)
    print(f"{'variant':<20} {'error_cm':>10} {'current_mA':>11} {'d_err_%':>9} {'d_cur_%':>9}")
    for r in rows:
        print(f"{r.variant:<20} {r.mean_error_cm:>10.2f} {r.mean_current_ma:>11.2f} "
              f"{r.error_delta_pct:>9.1f} {r.current_delta_pct:>9.1f}")
    return EXIT_OK


# --- entry point --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dltdoa", description="Adaptive UWB DL-TDOA localization simulator")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a labelled CIR corpus (or predictor feature windows)")
    g.add_argument("--scenario", help="preset name or scenario JSON (default: los_walk)")
    g.add_argument("--count", type=int, default=4000, help="frames per class (cir) or trajectories (sequences)")
    g.add_argument("--kind", choices=("cir", "sequences"), default="cir")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=_seed, default=0)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train-nlos", help="train the CNN NLOS classifier on a CIR corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--seed", type=_seed, default=0)
    t.set_defaults(func=cmd_train_nlos)

    r = sub.add_parser("train-rnn", help="train the LSTM localization predictor")
    r.add_argument("--corpus", help="feature-window NPZ from gen-corpus --kind sequences")
    r.add_argument("--nlos-model", help="CNN checkpoint; enables closed-loop rollouts")
    r.add_argument("--scenario", help="scenario whose anchor cluster is used (default: los_walk)")
    r.add_argument("--out", required=True)
    r.add_argument("--epochs", type=int, default=50)
    r.add_argument("--rounds", type=int, default=4, help="closed-loop rollout rounds")
    r.add_argument("--trajectories", type=int, default=40)
    r.add_argument("--seed", type=_seed, default=0)
    r.set_defaults(func=cmd_train_rnn)

    u = sub.add_parser("run", help="simulate one or more pipeline variants on a scenario")
    u.add_argument("--config", help="RunConfig JSON")
    u.add_argument("--scenario")
    u.add_argument("--variant", action="append",
                   choices=("proposed", "baseline_static_ls", "baseline_kf"))
    u.add_argument("--nlos-model")
    u.add_argument("--rnn-model")
    u.add_argument("--seed", type=_seed)
    u.add_argument("--out")
    u.add_argument("--jobs", type=int, default=1)
    u.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate error and current deltas between runs")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def _configure_logging() -> None:
    level = os.environ.get("TDOA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    from .localizer import LocalizationError
    from .nlos import UntrainedModelError
    from .nn.checkpoint import CheckpointError

    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, UntrainedModelError) as exc:
        print(f"dltdoa: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"dltdoa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (LocalizationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"dltdoa: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
