"""Command-line entry point: ``piwan <subcommand> [options]``.

Exit codes: 0 success, 1 configuration or argument error, 2 runtime failure.
All outputs of a run live under ``<output_dir>/<run_id>/`` and existing
result files are never overwritten.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from . import bench, data, net, train
from .adapter import LearnedCompensator
from .config import RunConfig
from .errors import ConfigError, PiwanError
from .mpc import track
from .trajectories import TRAIN_KINDS, TrajectoryKind

log = logging.getLogger("piwan")

DATASET_FILE = "dataset.bin"
CHECKPOINT_DIR = "checkpoints"
ECHO_FILE = "config-echo.yaml"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class RunExists(PiwanError, RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------

def _parse_wind(text: str) -> tuple[float, float]:
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"--wind: expected 'wx,wy' in m/s, got {text!r}") from None
    if len(parts) != 2:
        raise UsageError(f"--wind: expected two comma-separated values, got {text!r}")
    return parts[0], parts[1]


def _fresh(path: Path) -> Path:
    if path.exists():
        raise RunExists(f"{path} already exists; choose a new run id")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_echo(cfg: RunConfig) -> None:
    """Record the configuration; a run directory only ever holds one."""
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / ECHO_FILE
    text = cfg.echo()
    if path.exists():
        if path.read_text() != text:
            raise RunExists(f"{run_dir} was created with a different configuration (see {path}); use a new run id")
        return
    path.write_text(text)


def _log_command(cfg: RunConfig, argv) -> None:
    with open(cfg.run_dir / "commands.log", "a") as f:
        f.write(" ".join(["piwan", *argv]) + "\n")


def checkpoint_path(cfg: RunConfig, method, seed: int) -> Path:
    return cfg.run_dir / CHECKPOINT_DIR / bench.checkpoint_name(method, seed)


def _collect(cfg: RunConfig, out: Path) -> data.Dataset:
    d = cfg["data"]
    grid = tuple(tuple(w) for w in d["wind_grid"])
    cells = data.training_cells(cfg.train_specs(), grid, d["winds_per_kind"], cfg.seed, cfg.drag)
    ds = data.collect(cells, cfg.mpc_config(), cfg.mpc_weights(), d["duration"], cfg.seed, cfg["net"]["T"], cfg.threads)
    data.save_dataset(_fresh(out), ds)
    return ds


def _train(cfg: RunConfig, method, seed: int, dataset: Path) -> Path:
    ds = data.load_dataset(dataset)
    T = cfg["net"]["T"]
    windows = data.windowize(ds, T, purpose="train")
    tcfg, ncfg = bench.method_configs(method, cfg.train_config(seed=seed), cfg.net_config(seed=seed))
    out = _fresh(checkpoint_path(cfg, method, seed))
    res = train.fit(windows, tcfg, ncfg, dt=ds.dt)
    extra = {"method": bench.Method.parse(method).value, "seed": seed, "final_val_loss": res.final_val_loss}
    net.save_checkpoint(out, res.params, extra)
    train.write_log(out.with_suffix(".log.csv"), res.log)
    return out


# -- subcommands -------------------------------------------------------------

def cmd_collect(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else cfg.run_dir / DATASET_FILE
    t0 = time.perf_counter()
    ds = _collect(cfg, out)
    print(f"wrote {out} ({len(ds.rollouts)} rollouts, {sum(len(r) for r in ds.rollouts)} records) in {time.perf_counter() - t0:.1f} s")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    dataset = Path(args.dataset) if args.dataset else cfg.run_dir / DATASET_FILE
    t0 = time.perf_counter()
    out = _train(cfg, args.method, seed, dataset)
    print(f"wrote {out} in {time.perf_counter() - t0:.1f} s")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    params = net.load_checkpoint(args.checkpoint)
    wind = _parse_wind(args.wind) if args.wind else tuple(cfg["data"]["eval_wind"])
    kinds = [TrajectoryKind.parse(k) for k in args.traj] if args.traj else list(cfg["bench"]["trajectories"])
    specs = [cfg.spec(k) for k in kinds]
    ds = data.collect(
        [(s, cfg.wind(*wind)) for s in specs], cfg.mpc_config(), cfg.mpc_weights(),
        cfg["data"]["duration"], cfg.seed, params.config.T, cfg.threads, allow_unseen=True,
    )
    out = _fresh(cfg.run_dir / f"eval-{Path(args.checkpoint).stem}.csv")
    rows = []
    for r in ds.rollouts:
        model_rmse = bench.prediction_rmse(params, r, params.config.T)
        nom_rmse = bench.prediction_rmse(None, r, params.config.T)
        split = "train" if r.kind in TRAIN_KINDS else "unseen"
        rows.append((r.kind.value, split, wind[0], wind[1], model_rmse, nom_rmse))
        print(f"{r.kind.value:22s} {split:6s} model {model_rmse:.4f}  nom {nom_rmse:.4f} m/s^2")
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("trajectory", "split", "wind_x", "wind_y", "prediction_rmse", "nom_prediction_rmse"))
        w.writerows((a, b, repr(c), repr(d), repr(e), repr(g)) for a, b, c, d, e, g in rows)
    return 0


def cmd_track(cfg: RunConfig, args) -> int:
    method = bench.Method.parse(args.method)
    wind = _parse_wind(args.wind)
    spec = cfg.spec(args.traj)
    seed = cfg.seed if args.seed is None else args.seed
    comp = None
    if method.learned:
        ck = Path(args.checkpoint) if args.checkpoint else checkpoint_path(cfg, method, seed)
        comp = LearnedCompensator(net.load_checkpoint(ck), cfg.adapter_config(), cfg.mpc_config().dt)
    out = _fresh(cfg.run_dir / f"track-{method.value}-{spec.kind.value}.svg")
    lg = track(spec, comp, cfg.wind(*wind), cfg.mpc_config(), cfg.mpc_weights(), args.duration or cfg["bench"]["duration"])
    out.write_text(bench.trajectory_svg(lg.ref_positions[:, :2], {f"{method.value} w=({wind[0]:g},{wind[1]:g})": lg.rollout.states[:, :2]},
                                        f"{method.value} {spec.kind.value}"))
    print(f"tracking RMSE {lg.rmse:.6f} m ({method.value}, {spec.kind.value}, wind {wind[0]:g},{wind[1]:g}); wrote {out}")
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    b = cfg["bench"]
    methods = [bench.Method.parse(m) for m in b["methods"]]
    models = {}
    for m in methods:
        if not m.learned:
            continue
        for s in b["seeds"]:
            ck = checkpoint_path(cfg, m, s)
            if not ck.exists():
                if not args.train_missing:
                    raise FileNotFoundError(f"missing checkpoint {ck}; train it or pass --train-missing")
                ds_path = cfg.run_dir / DATASET_FILE
                if not ds_path.exists():
                    print(f"collecting {ds_path}")
                    _collect(cfg, ds_path)
                print(f"training {m.value} seed {s}")
                _train(cfg, m, s, ds_path)
            models[(m.value, s)] = ck
    matrix = cfg.run_dir / "matrix.csv"
    if matrix.exists():
        raise RunExists(f"{matrix} already exists; choose a new run id")
    t0 = time.perf_counter()
    report = bench.run_matrix(
        methods, [cfg.spec(k) for k in b["trajectories"]], [tuple(w) for w in b["winds"]], b["seeds"], models,
        cfg.mpc_config(), cfg.mpc_weights(), cfg.adapter_config(), b["duration"], cfg.drag, cfg.threads,
    )
    written = bench.emit_report(report, cfg.run_dir)
    failed = [c for c in report.cells if c.error]
    print(f"{len(report.cells)} cells ({len(failed)} failed) in {time.perf_counter() - t0:.1f} s; wrote {len(written)} files to {cfg.run_dir}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    report = bench.load_matrix_csv(args.csv)
    out_dir = Path(args.out) if args.out else cfg.run_dir
    for t in sorted({c.trajectory for c in report.cells}):
        _fresh(out_dir / f"heatmap-{t}.svg")
    written = bench.emit_report(report, out_dir, formats=("svg-heatmap",))
    for p in written:
        print(f"wrote {p}")
    return 0


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval": cmd_eval,
    "track": cmd_track,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run configuration (defaults apply to omitted keys)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set train.epochs=50 (repeatable)")
    common.add_argument("--run-id", help="override run_id")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = _Parser(prog="piwan", description="Wind-adaptive learned-dynamics MPC pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("collect", parents=[common], help="fly nominal MPC on training trajectories and write a dataset")
    s.add_argument("--out", help="dataset path (default <run dir>/dataset.bin)")

    s = sub.add_parser("train", parents=[common], help="train a learned model")
    s.add_argument("--method", required=True, choices=[m.value for m in bench.Method if m.learned])
    s.add_argument("--dataset", help="dataset path (default <run dir>/dataset.bin)")

    s = sub.add_parser("eval", parents=[common], help="prediction RMSE of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--traj", action="append", help="trajectory kind (repeatable; default: bench.trajectories)")
    s.add_argument("--wind", help="wx,wy in m/s (default data.eval_wind)")

    s = sub.add_parser("track", parents=[common], help="closed-loop tracking run")
    s.add_argument("--method", required=True, choices=[m.value for m in bench.Method])
    s.add_argument("--traj", required=True, help="trajectory kind, e.g. circle")
    s.add_argument("--wind", default="0,0", help="wx,wy in m/s")
    s.add_argument("--checkpoint", help="checkpoint for learned methods (default from the run dir)")
    s.add_argument("--duration", type=float, help="seconds (default bench.duration)")

    s = sub.add_parser("sweep", parents=[common], help="run the full method x trajectory x wind matrix")
    s.add_argument("--train-missing", action="store_true", help="collect and train any missing checkpoints first")

    s = sub.add_parser("report", parents=[common], help="render heatmaps from a matrix CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--out", help="output directory (default the run dir)")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.set)
        if args.run_id is not None:
            overrides.append(f"run_id={args.run_id}")
        if args.seed is not None and args.command not in ("train", "track"):
            overrides.append(f"seed={args.seed}")
        cfg = RunConfig.load(args.config, overrides)
        if args.command == "track" and args.traj:
            TrajectoryKind.parse(args.traj)
            _parse_wind(args.wind)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _write_echo(cfg)
        _log_command(cfg, sys.argv[1:] if argv is None else list(argv))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
