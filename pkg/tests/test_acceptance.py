"""Acceptance criteria 1-13.

Each test records one pass/fail line (printed in the terminal summary by
conftest.py) before asserting. The expensive end-to-end pipeline (dataset
collection, ten trainings, the default sweep) runs through the ``piwan``
command line once and is cached under ``.pytest_cache``, keyed by a hash of
the package sources, so later runs with unchanged code reuse its files.
Delete the cache (``pytest --cache-clear``) to rebuild from scratch.
"""

import hashlib
import heapq
import json
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

import piwan
from conftest import record
from piwan import adapter, bench, cli, data, net
from piwan import dynamics as dyn
from piwan import mpc
from piwan.config import RunConfig
from piwan.trajectories import TRAIN_KINDS, UNSEEN_KINDS, TrajectorySpec
from test_mpc import dense_oracle, double_integrator
from test_net import MLP, TCN, _fd_check

SEEDS = (0, 1, 2)
EVAL_WIND = (5.0, 0.0)
LEARNED = ("tcn", "pi-wan", "pi-tcn")
PIPELINE_VERSION = "1"


# -- criteria 1-6: properties of the building blocks --------------------------

def test_c01_rk4_order():
    t0 = time.perf_counter()

    def err(dt):
        y = np.array([1.0])
        for _ in range(int(round(1 / dt))):
            y = dyn.rk4_step(lambda x, u: x, y, np.zeros(0), dt)
        return abs(y[0] - np.e)

    ratio = err(1e-2) / err(5e-3)
    elapsed = time.perf_counter() - t0
    ok = 12 <= ratio <= 20 and elapsed < 1.0
    record(1, ok, f"error ratio {ratio:.3f} (need [12, 20]), {elapsed:.3f} s (need < 1 s)")
    assert ok


def test_c02_quaternion_integrity():
    rng = np.random.default_rng(0)
    n_states, n_steps = 1000, 100
    x = np.zeros((n_states, 10))
    x[:, dyn.Q] = dyn.quat_normalize(rng.standard_normal((n_states, 4)))
    x[:, dyn.V] = rng.uniform(-3, 3, (n_states, 3))
    worst = 0.0
    for _ in range(n_steps):
        u = np.column_stack([rng.uniform(2, 20, n_states), rng.uniform(-3, 3, (n_states, 3))])
        x = dyn.rk4_step(dyn.nominal_derivative, x, u, 0.02)
        worst = max(worst, float(np.max(np.abs(np.linalg.norm(x[:, dyn.Q], axis=1) - 1))))
    h = dyn.hover_state()
    drift = float(np.max(np.abs(dyn.nominal_step(h, dyn.HOVER_INPUT, 0.02) - h)))
    ok = worst <= 1e-9 and drift <= 1e-12
    record(2, ok, f"{n_states * n_steps} steps, max | |q| - 1 | = {worst:.2e} (need <= 1e-9); hover drift {drift:.1e} (need <= 1e-12)")
    assert ok


def test_c03_gradient_correctness():
    t0 = time.perf_counter()
    errs = {"tcn": _fd_check(TCN), "mlp": _fd_check(MLP)}
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-3 and elapsed < 30
    target = "meets" if worst <= 1e-4 else "misses"
    record(3, ok, f"max rel. error tcn {errs['tcn']:.1e}, mlp {errs['mlp']:.1e} (need <= 1e-3, {target} 1e-4 target), {elapsed:.1f} s")
    assert ok


def test_c04_mpc_oracle_equivalence():
    t0 = time.perf_counter()
    H, dt = 10, 0.1
    cfg = mpc.MpcConfig(H=H, dt=dt, u_min=(-1e6,), u_max=(1e6,), quaternion=False)
    w = mpc.MpcWeights(Q=[2.0, 0.3], R=[0.1], Q_terminal=[8.0, 1.0])
    t = dt * np.arange(H + 1)
    xr = np.column_stack([np.sin(t), np.cos(t)])
    ur = np.column_stack([-np.sin(t)])
    x0 = np.array([0.5, -0.4])
    sol = mpc.solve(x0, (xr, ur), double_integrator, cfg, w)
    U = dense_oracle(x0, xr, ur, w.Q, w.Q_terminal, w.R, H, dt)
    dev = float(np.max(np.abs(sol.inputs[:, 0] - U)))
    elapsed = time.perf_counter() - t0
    ok = dev <= 1e-6 and elapsed < 5
    record(4, ok, f"max |u_sqp - u_lstsq| = {dev:.1e} (need <= 1e-6), {elapsed:.2f} s")
    assert ok


@pytest.fixture(scope="module")
def circle_runs():
    """Nominal MPC on the circle for x-winds 0, 2, 4, 6 m/s (20 s each)."""
    runs = {}
    for wx in (0.0, 2.0, 4.0, 6.0):
        t0 = time.perf_counter()
        lg = mpc.track(TrajectorySpec("circle"), None, dyn.WindField.xy(wx, 0.0), mpc.MpcConfig(), mpc.MpcWeights(), 20.0)
        runs[wx] = (lg.rmse, time.perf_counter() - t0)
    return runs


def test_c05_no_wind_closed_loop(circle_runs):
    rmse, elapsed = circle_runs[0.0]
    ok = rmse < 0.05 and elapsed < 60
    record(5, ok, f"Nom-MPC circle RMSE {rmse:.4f} m (need < 0.05), {elapsed:.1f} s (need < 60 s)")
    assert ok


def test_c06_wind_degradation(circle_runs):
    vals = [circle_runs[w][0] for w in (0.0, 2.0, 4.0, 6.0)]
    ok = all(b > a for a, b in zip(vals, vals[1:]))
    record(6, ok, "Nom-MPC circle RMSE at wx=0,2,4,6: " + ", ".join(f"{v:.4f}" for v in vals) + " (need strictly increasing)")
    assert ok


# -- the cached end-to-end pipeline --------------------------------------------

def _source_key() -> str:
    h = hashlib.sha256(PIPELINE_VERSION.encode())
    for p in sorted(Path(piwan.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


class Pipeline:
    """Default-configuration runs through the CLI, resumable step by step."""

    def __init__(self, root: Path):
        self.root = root
        self.times_path = root / "times.json"
        self.times = json.loads(self.times_path.read_text()) if self.times_path.exists() else {}
        self.cfg = RunConfig.load(None, [f"output_dir={root}", "run_id=main"])

    def run_dir(self, run_id="main") -> Path:
        return self.root / run_id

    def step(self, name, output: Path, argv):
        """Run a CLI command unless its output already exists from a completed step."""
        if name in self.times and output.exists():
            return
        if output.exists():
            output.unlink()  # left over from an interrupted step
        t0 = time.perf_counter()
        rc = cli.main([*argv, "--set", f"output_dir={self.root}"])
        assert rc == 0, f"{' '.join(argv)} exited with {rc}"
        self.times[name] = time.perf_counter() - t0
        self.times_path.write_text(json.dumps(self.times, indent=1, sort_keys=True))

    def checkpoint(self, method, seed, run_id="main") -> Path:
        return self.run_dir(run_id) / "checkpoints" / bench.checkpoint_name(method, seed)

    def build(self):
        self.step("collect", self.run_dir() / "dataset.bin", ["collect", "--run-id", "main"])
        jobs = [(m, s) for s in SEEDS for m in LEARNED] + [("pi-mlp", 0)]
        for m, s in jobs:
            self.step(f"train {m} {s}", self.checkpoint(m, s), ["train", "--method", m, "--seed", str(s), "--run-id", "main"])
        # an independent second run for the determinism criterion
        self.step("collect repeat", self.run_dir("repeat") / "dataset.bin", ["collect", "--run-id", "repeat"])
        self.step("train pi-wan 0 repeat", self.checkpoint("pi-wan", 0, "repeat"),
                  ["train", "--method", "pi-wan", "--seed", "0", "--run-id", "repeat"])
        self.build_eval()
        self.step("sweep", self.run_dir() / "matrix.csv", ["sweep", "--run-id", "main"])
        return self

    def build_eval(self):
        path = self.root / "eval.bin"
        if "eval collect" in self.times and path.exists():
            return
        t0 = time.perf_counter()
        cells = [(self.cfg.spec(k), self.cfg.wind(*EVAL_WIND)) for k in (*TRAIN_KINDS, *UNSEEN_KINDS)]
        ds = data.collect(cells, self.cfg.mpc_config(), self.cfg.mpc_weights(), self.cfg["data"]["duration"],
                          self.cfg.seed, self.cfg["net"]["T"], self.cfg.threads, allow_unseen=True)
        data.save_dataset(path, ds)
        self.times["eval collect"] = time.perf_counter() - t0
        self.times_path.write_text(json.dumps(self.times, indent=1, sort_keys=True))

    def eval_rollouts(self):
        return data.load_dataset(self.root / "eval.bin").rollouts


@pytest.fixture(scope="session")
def pipeline(request):
    root = Path(request.config.cache.mkdir("piwan-acceptance")) / _source_key()
    root.mkdir(parents=True, exist_ok=True)
    return Pipeline(root).build()


@pytest.fixture(scope="session")
def prediction(pipeline):
    """Prediction RMSE at 5 m/s x-wind: {(method, seed): {kind: rmse}} plus timings."""
    rollouts = pipeline.eval_rollouts()
    out, eval_time = {}, {}
    nom = {r.kind.value: bench.prediction_rmse(None, r, 20) for r in rollouts}
    for m in (*LEARNED, "pi-mlp"):
        for s in SEEDS if m != "pi-mlp" else (0,):
            t0 = time.perf_counter()
            p = net.load_checkpoint(pipeline.checkpoint(m, s))
            out[(m, s)] = {r.kind.value: bench.prediction_rmse(p, r, p.config.T) for r in rollouts}
            eval_time[(m, s)] = time.perf_counter() - t0
    return nom, out, eval_time


def _mean_over_seeds(pred, method, kind):
    return float(np.mean([pred[(method, s)][kind] for s in SEEDS]))


# -- criteria 7-13 -------------------------------------------------------------

def test_c07_learning_beats_nominal(pipeline, prediction):
    nom, pred, eval_time = prediction
    kinds = [k.value for k in TRAIN_KINDS]
    tcn = float(np.mean([pred[("tcn", 0)][k] for k in kinds]))
    nominal = float(np.mean([nom[k] for k in kinds]))
    minutes = (pipeline.times["train tcn 0"] + pipeline.times["eval collect"] + eval_time[("tcn", 0)]) / 60
    ratio = tcn / nominal
    ok = ratio <= 0.2 and minutes < 20
    record(7, ok, f"TCN {tcn:.4f} vs Nom {nominal:.4f} m/s^2 on training kinds (ratio {ratio:.3f}, need <= 0.2); "
                  f"train+eval {minutes:.1f} min (need < 20)")
    assert ok


def test_c08_physics_informed_ood_ordering(prediction):
    _, pred, _ = prediction
    parts, ok = [], True
    for k in UNSEEN_KINDS:
        pw, tc = _mean_over_seeds(pred, "pi-wan", k.value), _mean_over_seeds(pred, "tcn", k.value)
        ok &= pw < tc
        parts.append(f"{k.value} PI-WAN {pw:.4f} vs TCN {tc:.4f}")
    record(8, ok, "; ".join(parts) + " (3-seed means, need PI-WAN < TCN)")
    assert ok


def test_c09_resampling_beats_fixed(prediction):
    _, pred, _ = prediction
    unseen = [k.value for k in UNSEEN_KINDS]
    pw = float(np.mean([_mean_over_seeds(pred, "pi-wan", k) for k in unseen]))
    pt = float(np.mean([_mean_over_seeds(pred, "pi-tcn", k) for k in unseen]))
    tie = pw <= 1.05 * pt
    detail = f"mean unseen RMSE PI-WAN {pw:.4f} vs PI-TCN {pt:.4f} (3-seed means)"
    if pw > pt and tie:
        warnings.warn(f"criterion 9 passes as a tie within 5%: {detail}")
        detail += ", tie within 5%"
    record(9, tie, detail)
    assert tie


def test_c10_closed_loop_improvement(pipeline):
    report = bench.load_matrix_csv(pipeline.run_dir() / "matrix.csv")
    parts, ok = [], True
    for k in UNSEEN_KINDS:
        pw = report.value("pi-wan", k.value, *EVAL_WIND, seed=0)
        nm = report.value("nom", k.value, *EVAL_WIND, seed=0)
        ok &= pw <= 0.8 * nm
        parts.append(f"{k.value} PI-WAN {pw:.4f} vs Nom {nm:.4f} m ({100 * (1 - pw / nm):.1f}% lower)")
    record(10, ok, "; ".join(parts) + " (need >= 20% lower)")
    assert ok


def _steady_hover(wind: dyn.WindField):
    """Zero-velocity equilibrium: the thrust vector cancels gravity and drag."""
    a = np.array([0.0, 0.0, dyn.GRAVITY]) - wind.drag_accel(np.zeros(3))
    thrust = float(np.linalg.norm(a))
    axis = np.cross([0.0, 0.0, 1.0], a / thrust)
    angle = float(np.arcsin(np.linalg.norm(axis)))
    q = dyn.quat_from_axis_angle(axis, angle) if angle > 0 else dyn.IDENTITY_QUAT
    return dyn.make_state(p=(0.0, 0.0, 1.0), q=q), np.array([thrust, 0.0, 0.0, 0.0])


def test_c11_disturbance_estimate(pipeline):
    wind = dyn.WindField.xy(5.0, 0.0)
    x, u = _steady_hover(wind)
    assert np.max(np.abs(dyn.plant_derivative(x, u, wind))) <= 1e-12
    truth = wind.drag_accel(np.zeros(3))
    assert np.allclose(truth, [1.5, 0.0, 0.0])
    params = net.load_checkpoint(pipeline.checkpoint("pi-wan", 0))
    cfg = pipeline.cfg.adapter_config()
    hist = adapter.ControlHistory.for_model(params.config.T, cfg, 0.02)
    for k in range(hist.capacity):
        hist.push(0.02 * k, x, u)
    f_w = adapter.estimate(params, hist, cfg)
    ok = abs(f_w[0] - truth[0]) <= 0.2 * abs(truth[0]) and abs(f_w[1]) <= 0.3 and abs(f_w[2]) <= 0.3
    record(11, ok, f"f_w = ({f_w[0]:.3f}, {f_w[1]:.3f}, {f_w[2]:.3f}) vs true drag ({truth[0]:.2f}, 0, 0) m/s^2")
    assert ok


def test_c12_determinism(pipeline):
    def digest(p):
        return hashlib.sha256(p.read_bytes()).hexdigest()

    same_data = digest(pipeline.run_dir() / "dataset.bin") == digest(pipeline.run_dir("repeat") / "dataset.bin")
    same_ckpt = digest(pipeline.checkpoint("pi-wan", 0)) == digest(pipeline.checkpoint("pi-wan", 0, "repeat"))
    ok = same_data and same_ckpt
    record(12, ok, f"two CLI runs: dataset identical={same_data}, PI-WAN checkpoint identical={same_ckpt}")
    assert ok


def _lpt_makespan(durations, workers):
    """Longest-processing-time-first schedule length on ``workers`` machines."""
    loads = [0.0] * workers
    for d in sorted(durations, reverse=True):
        heapq.heapreplace(loads, loads[0] + d)
    return max(loads)


def test_c13_sweep_budget(pipeline):
    rows = (pipeline.run_dir() / "timing.csv").read_text().splitlines()[1:]
    cell_times = [float(r.split(",")[-1]) for r in rows]
    report = bench.load_matrix_csv(pipeline.run_dir() / "matrix.csv")
    n_track = sum(c.metric == "tracking_rmse" for c in report.cells)
    failed = [c for c in report.cells if c.error]
    measured = pipeline.times["sweep"]
    cores = pipeline.cfg.threads
    if cores >= 8:
        projected = measured
    else:
        # the run used fewer cores: schedule the measured cells onto 8 and keep the serial remainder
        serial = max(0.0, measured - sum(cell_times))
        projected = _lpt_makespan(cell_times, 8) + serial
    ok = n_track == 140 and not failed and projected < 30 * 60
    record(13, ok, f"{n_track} tracking cells, {len(failed)} failed; {measured / 60:.1f} min on {cores} core(s), "
                   f"{projected / 60:.1f} min projected on 8 (need < 30)")
    assert ok
