"""Experiment matrix: prediction and tracking RMSE per method, trajectory and wind.

Methods map onto (backbone, collocation mode, adapter) as follows:

========  ========  ===========  =======
method    backbone  collocation  adapter
========  ========  ===========  =======
nom       -         -            off
tcn       tcn       off          on
pi-mlp    mlp       resampled    on
pi-tcn    tcn       fixed        on
pi-wan    tcn       resampled    on
========  ========  ===========  =======

``matrix.csv`` holds only deterministic columns so identical inputs give
identical bytes; per-cell wall times go to ``timing.csv``.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import enum
import html
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import dynamics as dyn
from .adapter import AdapterConfig, LearnedCompensator
from .data import FlightRollout, rollout_windows
from .errors import EmptyReport, RolloutTooShort
from .mpc import MpcConfig, MpcWeights, track
from .net import ModelParams, NetConfig, load_checkpoint, predict_raw
from .trajectories import TrajectoryKind, TrajectorySpec
from .train import TrainConfig

log = logging.getLogger(__name__)

MATRIX_COLUMNS = ("method", "trajectory", "wind_x", "wind_y", "metric", "value", "seed", "error")


class Method(str, enum.Enum):
    NOM = "nom"
    TCN = "tcn"
    PI_MLP = "pi-mlp"
    PI_TCN = "pi-tcn"
    PI_WAN = "pi-wan"

    @classmethod
    def parse(cls, name) -> "Method":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for suffix in ("-mpc",):
            key = key.removesuffix(suffix)
        return cls(key)

    @property
    def learned(self) -> bool:
        return self is not Method.NOM

    @property
    def backbone(self) -> str | None:
        return {Method.NOM: None, Method.PI_MLP: "mlp"}.get(self, "tcn")

    @property
    def collocation(self) -> str | None:
        return {
            Method.NOM: None,
            Method.TCN: "off",
            Method.PI_MLP: "resampled",
            Method.PI_TCN: "fixed",
            Method.PI_WAN: "resampled",
        }[self]


ALL_METHODS = tuple(Method)


def method_configs(method, train_cfg: TrainConfig, net_cfg: NetConfig) -> tuple[TrainConfig, NetConfig]:
    """Training and network configuration realizing a learned method."""
    m = Method.parse(method)
    if not m.learned:
        raise ValueError("the nominal method has no trained model")
    return replace(train_cfg, collocation=m.collocation), replace(net_cfg, backbone=m.backbone)


def checkpoint_name(method, seed: int) -> str:
    return f"{Method.parse(method).value}-seed{seed}.bin"


# -- metrics -----------------------------------------------------------------

def prediction_rmse(model: ModelParams | None, rollout: FlightRollout, T: int) -> float:
    """RMSE (m/s^2) of predicted vs true velocity derivative over all windows.

    ``model=None`` evaluates the nominal model at each window's last frame.
    """
    if len(rollout) <= T:
        raise RolloutTooShort(f"rollout of {len(rollout)} records is not longer than T={T}")
    feats, labels = rollout_windows(rollout, T)
    if model is None:
        pred = dyn.nominal_derivative(rollout.states[T - 1 :], rollout.inputs[T - 1 :])[:, dyn.V]
    else:
        pred = predict_raw(model, feats)
    return float(np.sqrt(np.mean(np.sum((pred - labels) ** 2, axis=1))))


# -- report ------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    method: str
    trajectory: str
    wind_x: float
    wind_y: float
    metric: str
    value: float
    seed: int
    error: str = ""
    wall_time: float = 0.0

    @property
    def key(self):
        return (self.method, self.trajectory, self.wind_x, self.wind_y, self.seed, self.metric)

    def sort_key(self):
        return (
            ALL_METHODS.index(Method(self.method)),
            [k.value for k in TrajectoryKind].index(self.trajectory),
            self.wind_x,
            self.wind_y,
            self.seed,
            self.metric,
        )


@dataclass
class BenchReport:
    cells: list[Cell]
    paths: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def sorted(self) -> "BenchReport":
        return BenchReport(sorted(self.cells, key=Cell.sort_key), self.paths, self.config)

    def value(self, method, trajectory, wind_x, wind_y, metric="tracking_rmse", seed=None) -> float:
        m = Method.parse(method).value
        t = TrajectoryKind.parse(trajectory).value
        vals = [
            c.value
            for c in self.cells
            if c.method == m and c.trajectory == t and c.wind_x == wind_x and c.wind_y == wind_y
            and c.metric == metric and (seed is None or c.seed == seed)
        ]
        if not vals:
            raise KeyError((m, t, wind_x, wind_y, metric, seed))
        return float(np.mean(vals))


def _fmt(v: float) -> str:
    return repr(float(v))


def write_matrix_csv(report: BenchReport, path) -> None:
    if not report.cells:
        raise EmptyReport("report has no cells")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MATRIX_COLUMNS)
        for c in report.sorted().cells:
            w.writerow((c.method, c.trajectory, _fmt(c.wind_x), _fmt(c.wind_y), c.metric, _fmt(c.value), c.seed, c.error))


def load_matrix_csv(path) -> BenchReport:
    cells = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            cells.append(
                Cell(
                    row["method"],
                    row["trajectory"],
                    float(row["wind_x"]),
                    float(row["wind_y"]),
                    row["metric"],
                    float(row["value"]),
                    int(row["seed"]),
                    row["error"],
                )
            )
    return BenchReport(cells)


def write_timing_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("method", "trajectory", "wind_x", "wind_y", "metric", "seed", "wall_time"))
        for c in report.sorted().cells:
            w.writerow((c.method, c.trajectory, c.wind_x, c.wind_y, c.metric, c.seed, f"{c.wall_time:.3f}"))


# -- SVG rendering -----------------------------------------------------------

def _color(v: float, lo: float, hi: float) -> str:
    if not math.isfinite(v):
        return "#888888"
    s = 0.0 if hi <= lo else min(1.0, max(0.0, (v - lo) / (hi - lo)))
    # white -> dark red
    r = 255 - int(100 * s)
    g = 255 - int(225 * s)
    b = 255 - int(225 * s)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(report: BenchReport, trajectory: str) -> str:
    """Method/seed rows by wind columns, one panel per metric, for one trajectory."""
    cells = [c for c in report.cells if c.trajectory == trajectory]
    metrics = sorted({c.metric for c in cells}, reverse=True)
    winds = sorted({(c.wind_x, c.wind_y) for c in cells})
    rows = sorted({(c.method, c.seed) for c in cells}, key=lambda r: (ALL_METHODS.index(Method(r[0])), r[1]))
    cw, ch, left, top, gap = 70, 24, 110, 40, 30
    panel_h = top + ch * len(rows) + gap
    width = left + cw * len(winds) + 20
    height = panel_h * len(metrics) + 10
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<title>{html.escape(trajectory)}</title>',
    ]
    for pi, metric in enumerate(metrics):
        y0 = pi * panel_h
        sub = {(c.method, c.seed, c.wind_x, c.wind_y): c for c in cells if c.metric == metric}
        vals = [c.value for c in sub.values() if math.isfinite(c.value)]
        lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
        out.append(f'<text x="4" y="{y0 + 14}" font-weight="bold">{html.escape(trajectory)}: {metric}</text>')
        for j, (wx, wy) in enumerate(winds):
            out.append(f'<text x="{left + j * cw + 4}" y="{y0 + top - 6}">w=({wx:g},{wy:g})</text>')
        for i, (m, s) in enumerate(rows):
            y = y0 + top + i * ch
            out.append(f'<text x="4" y="{y + 16}">{m} s{s}</text>')
            for j, (wx, wy) in enumerate(winds):
                c = sub.get((m, s, wx, wy))
                if c is None:
                    continue
                x = left + j * cw
                label = "err" if c.error else f"{c.value:.4f}"
                out.append(
                    f'<rect class="cell" data-method="{m}" data-seed="{s}" data-metric="{metric}" '
                    f'x="{x}" y="{y}" width="{cw - 2}" height="{ch - 2}" fill="{_color(c.value, lo, hi)}"/>'
                )
                out.append(f'<text x="{x + 6}" y="{y + 16}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def trajectory_svg(ref_xy: np.ndarray, paths: Mapping[str, np.ndarray], title: str = "") -> str:
    """Top-down overlay of a reference path and one or more flown paths."""
    allpts = np.vstack([ref_xy] + [np.asarray(p)[:, :2] for p in paths.values()])
    lo, hi = allpts.min(0), allpts.max(0)
    span = float(max(hi - lo)) or 1.0
    size, pad = 400, 20
    scale = (size - 2 * pad) / span

    def pts(xy):
        xy = np.asarray(xy)[:, :2]
        sx = pad + (xy[:, 0] - lo[0]) * scale
        sy = size - pad - (xy[:, 1] - lo[1]) * scale
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(sx, sy))

    colors = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20}" font-family="sans-serif" font-size="11">',
        f'<title>{html.escape(title)}</title>',
        f'<polyline class="reference" fill="none" stroke="#000" stroke-dasharray="4,3" points="{pts(ref_xy)}"/>',
    ]
    for i, (name, xy) in enumerate(paths.items()):
        c = colors[i % len(colors)]
        out.append(f'<polyline class="flown" data-name="{html.escape(name)}" fill="none" stroke="{c}" points="{pts(xy)}"/>')
        out.append(f'<text x="6" y="{size + 6 + 12 * i}" fill="{c}">{html.escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: BenchReport, out_dir, formats: Iterable[str] = ("csv", "svg-heatmap", "svg-trajectory")) -> list[Path]:
    """Write the report files; returns the paths written."""
    if not report.cells:
        raise EmptyReport("report has no cells")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    formats = set(formats)
    if "csv" in formats:
        write_matrix_csv(report, out / "matrix.csv")
        write_timing_csv(report, out / "timing.csv")
        written += [out / "matrix.csv", out / "timing.csv"]
    if "svg-heatmap" in formats:
        for t in sorted({c.trajectory for c in report.cells}):
            p = out / f"heatmap-{t}.svg"
            p.write_text(heatmap_svg(report, t))
            written.append(p)
    if "svg-trajectory" in formats:
        by_mt: dict = {}
        for (m, t, wx, wy, s), (ref, flown) in sorted(report.paths.items()):
            by_mt.setdefault((m, t), []).append(((wx, wy, s), ref, flown))
        for (m, t), entries in sorted(by_mt.items()):
            # overlay the strongest-wind run of the first seed
            (wx, wy, s), ref, flown = max(entries, key=lambda e: (math.hypot(e[0][0], e[0][1]), -e[0][2]))
            p = out / f"track-{m}-{t}.svg"
            p.write_text(trajectory_svg(ref, {f"{m} w=({wx:g},{wy:g})": flown}, f"{m} {t}"))
            written.append(p)
    return written


# -- matrix execution --------------------------------------------------------

@dataclass(frozen=True)
class _Job:
    method: Method
    spec: TrajectorySpec
    wind: tuple
    seed: int
    model: ModelParams | None
    mpc_cfg: MpcConfig
    weights: MpcWeights
    adapter_cfg: AdapterConfig
    duration: float
    drag: tuple


def _run_track(job: _Job):
    wind = dyn.WindField.xy(*job.wind, drag=job.drag)
    comp = None
    if job.model is not None:
        comp = LearnedCompensator(job.model, job.adapter_cfg, job.mpc_cfg.dt)
    t0 = time.perf_counter()
    try:
        lg = track(job.spec, comp, wind, job.mpc_cfg, job.weights, job.duration)
    except Exception as exc:  # per-cell capture
        return None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0
    return lg, "", time.perf_counter() - t0


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_matrix(
    methods: Sequence,
    trajectories: Sequence,
    winds: Sequence[tuple[float, float]],
    seeds: Sequence[int],
    models: Mapping[tuple[str, int], ModelParams | str | Path] | None = None,
    mpc_cfg: MpcConfig | None = None,
    weights: MpcWeights | None = None,
    adapter_cfg: AdapterConfig | None = None,
    duration: float = 20.0,
    drag=dyn.DEFAULT_DRAG,
    workers: int = 1,
    prediction: bool = True,
    keep_paths: bool = True,
) -> BenchReport:
    """Evaluate every (method, trajectory, wind, seed) cell.

    Tracking RMSE comes from a closed-loop run per cell. Prediction RMSE is
    measured on the nominal-MPC rollout of the same (trajectory, wind), which
    is shared by all methods. ``models`` maps ``(method, seed)`` to a
    checkpoint path or loaded parameters for every learned method.
    """
    mpc_cfg = mpc_cfg or MpcConfig()
    weights = weights or MpcWeights()
    adapter_cfg = adapter_cfg or AdapterConfig()
    methods = [Method.parse(m) for m in methods]
    specs = [t if isinstance(t, TrajectorySpec) else TrajectorySpec(t) for t in trajectories]
    winds = [tuple(float(c) for c in w) for w in winds]
    seeds = list(seeds)
    loaded: dict = {}
    for m in methods:
        if not m.learned:
            continue
        for s in seeds:
            src = (models or {}).get((m.value, s))
            if src is None:
                raise FileNotFoundError(f"no trained model for {m.value} seed {s}")
            loaded[(m.value, s)] = src if isinstance(src, ModelParams) else load_checkpoint(src)

    def job(m, spec, w, s):
        return _Job(m, spec, w, s, loaded.get((m.value, s)), mpc_cfg, weights, adapter_cfg, duration, tuple(drag))

    # the nominal run per (trajectory, wind) doubles as the prediction-evaluation rollout
    nom_jobs = [job(Method.NOM, spec, w, seeds[0]) for spec in specs for w in winds]
    nom_results = dict(zip([(j.spec.kind.value, j.wind) for j in nom_jobs], _map(_run_track, nom_jobs, workers)))
    learned_jobs = [job(m, spec, w, s) for m in methods if m.learned for spec in specs for w in winds for s in seeds]
    learned_results = _map(_run_track, learned_jobs, workers)

    cells: list[Cell] = []
    paths: dict = {}

    def add_track(j: _Job, res):
        lg, err, wall = res
        value = lg.rmse if lg is not None else float("nan")
        cells.append(Cell(j.method.value, j.spec.kind.value, j.wind[0], j.wind[1], "tracking_rmse", value, j.seed, err, wall))
        if lg is not None and keep_paths:
            paths[(j.method.value, j.spec.kind.value, j.wind[0], j.wind[1], j.seed)] = (
                lg.ref_positions[:, :2], lg.rollout.states[:, :2]
            )

    if Method.NOM in methods:
        for s in seeds:
            for j in nom_jobs:
                add_track(replace(j, seed=s), nom_results[(j.spec.kind.value, j.wind)])
    for j, res in zip(learned_jobs, learned_results):
        add_track(j, res)

    if prediction:
        T = next((p.config.T for p in loaded.values()), 20)
        for m in methods:
            for spec in specs:
                for w in winds:
                    lg, err, _ = nom_results[(spec.kind.value, w)]
                    for s in seeds:
                        t0 = time.perf_counter()
                        if lg is None:
                            value, e = float("nan"), f"evaluation rollout failed: {err}"
                        else:
                            ro = lg.rollout
                            fr = FlightRollout(spec.kind, dyn.WindField.xy(*w, drag=drag), ro.t, ro.states, ro.inputs, ro.derivs[:, dyn.V])
                            try:
                                value, e = prediction_rmse(loaded.get((m.value, s)), fr, T), ""
                            except Exception as exc:
                                value, e = float("nan"), f"{type(exc).__name__}: {exc}"
                        cells.append(Cell(m.value, spec.kind.value, w[0], w[1], "prediction_rmse", value, s, e, time.perf_counter() - t0))

    report = BenchReport(cells, paths)
    return report.sorted()
