"""Flight-data collection, windowing, normalization and the dataset file.

A dataset is a list of rollouts recorded by the nominal MPC on the wind
plant. Each rollout row stores ``t, p, q, v, u`` and the true plant velocity
derivative. Training windows are stride-1 slices of ``T`` consecutive frames
of ``(q, v, u)`` taken within one rollout; the label is the velocity
derivative at the window's last frame.

File layout (all little-endian)::

    8 bytes   magic  b"PIWANDS\\0"
    u32       format version
    u64       header length in bytes
    ...       UTF-8 JSON header: dt, T, column schema, seed, wind table,
              per-rollout table (kind, wind, drag, row count)
    f64[]     row-major rows, one per record, columns per the schema
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import dynamics as dyn
from .errors import EmptyDataset, FormatError, RolloutTooShort, UnseenTrajectoryError
from .trajectories import TRAIN_KINDS, TrajectoryKind, TrajectorySpec

log = logging.getLogger(__name__)

N_FEATURES = 11
N_TARGETS = 3
FEATURE_NAMES = ("qw", "qx", "qy", "qz", "vx", "vy", "vz", "t_mn", "wx", "wy", "wz")
COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz",
           "t_mn", "wx", "wy", "wz", "dvx", "dvy", "dvz")
DATASET_MAGIC = b"PIWANDS\0"
DATASET_VERSION = 1
STD_FLOOR = 1e-6

# Physical resolution of each channel, used as a std floor for training.
# Flight data barely excites some channels (yaw rate, vertical acceleration);
# a z-score with their raw std would put broader inputs thousands of sigma out.
PHYSICAL_FEATURE_FLOOR = np.array([0.05] * 4 + [0.25] * 3 + [0.5] + [0.25] * 3)
PHYSICAL_TARGET_FLOOR = np.array([0.1, 0.1, 0.1])

TRAINING_WIND_GRID = tuple((float(x), float(y)) for x in (0, 2, 4) for y in (0, 2, 4))


@dataclass
class FlightRollout:
    """One recorded flight: rows of state, input and true velocity derivative."""

    kind: TrajectoryKind
    wind: dyn.WindField
    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    dv_true: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def features(self) -> np.ndarray:
        """Per-frame model inputs ``(n, 11)``: q, v, u."""
        return np.concatenate([self.states[:, dyn.Q], self.states[:, dyn.V], self.inputs], axis=1)


@dataclass
class Dataset:
    rollouts: list[FlightRollout]
    dt: float
    T: int = 20
    seed: int = 0

    def __len__(self) -> int:
        return len(self.rollouts)

    @property
    def n_records(self) -> int:
        return sum(len(r) for r in self.rollouts)


@dataclass
class Windows:
    """Stacked training windows with their provenance tags."""

    features: np.ndarray  # (N, 11, T)
    targets: np.ndarray  # (N, 3)
    rollout_id: np.ndarray  # (N,)
    end_index: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, idx) -> "Windows":
        return Windows(self.features[idx], self.targets[idx], self.rollout_id[idx], self.end_index[idx])


@dataclass
class NormStats:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def __post_init__(self):
        for name in ("feature_mean", "feature_std", "target_mean", "target_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.feature_std = np.maximum(self.feature_std, STD_FLOOR)
        self.target_std = np.maximum(self.target_std, STD_FLOOR)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(N_FEATURES), np.ones(N_FEATURES), np.zeros(N_TARGETS), np.ones(N_TARGETS))

    def normalize_features(self, f):
        return (np.asarray(f, float) - self.feature_mean[:, None]) / self.feature_std[:, None]

    def denormalize_features(self, f):
        return np.asarray(f, float) * self.feature_std[:, None] + self.feature_mean[:, None]

    def normalize_targets(self, y):
        return (np.asarray(y, float) - self.target_mean) / self.target_std

    def denormalize_targets(self, y):
        return np.asarray(y, float) * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature_mean", "feature_std", "target_mean", "target_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, float) for k, v in d.items()})


# -- collection --------------------------------------------------------------

def training_cells(kinds: Sequence, grid=TRAINING_WIND_GRID, per_kind: int = 5, seed: int = 0,
                   drag=dyn.DEFAULT_DRAG) -> list[tuple[TrajectorySpec, dyn.WindField]]:
    """(trajectory, wind) pairs: ``per_kind`` winds drawn from ``grid`` for each kind."""
    rng = np.random.default_rng(seed)
    cells = []
    for kind in kinds:
        spec = kind if isinstance(kind, TrajectorySpec) else TrajectorySpec(kind)
        pick = np.sort(rng.choice(len(grid), size=min(per_kind, len(grid)), replace=False))
        cells.extend((spec, dyn.WindField.xy(*grid[i], drag=drag)) for i in pick)
    return cells


def _collect_cell(args) -> FlightRollout:
    from .mpc import track

    spec, wind, mpc_cfg, weights, duration = args
    log_ = track(spec, None, wind, mpc_cfg, weights, duration)
    r = log_.rollout
    return FlightRollout(spec.kind, wind, r.t, r.states, r.inputs, r.derivs[:, dyn.V].copy())


def collect(cells, mpc_cfg, weights, duration: float = 20.0, seed: int = 0, T: int = 20,
            workers: int = 1, allow_unseen: bool = False) -> Dataset:
    """Fly the nominal MPC on every (trajectory, wind) cell and record the rollouts."""
    cells = list(cells)
    if not allow_unseen:
        bad = [s.kind.value for s, _ in cells if s.kind not in TRAIN_KINDS]
        if bad:
            raise UnseenTrajectoryError(f"collection for training must use training kinds, got {bad}")
    jobs = [(spec, wind, mpc_cfg, weights, duration) for spec, wind in cells]
    if workers > 1 and len(jobs) > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            rollouts = list(ex.map(_collect_cell, jobs))
    else:
        rollouts = [_collect_cell(j) for j in jobs]
    return Dataset(rollouts, dt=mpc_cfg.dt, T=T, seed=seed)


# -- windows and normalization ----------------------------------------------

def rollout_windows(rollout: FlightRollout, T: int) -> tuple[np.ndarray, np.ndarray]:
    """All stride-1 windows of one rollout: features ``(n-T+1, 11, T)``, targets."""
    if T < 1:
        raise ValueError("T must be >= 1")
    n = len(rollout)
    if n < T:
        raise RolloutTooShort(f"rollout has {n} records, window needs {T}")
    f = rollout.features  # (n, 11)
    view = np.lib.stride_tricks.sliding_window_view(f, T, axis=0)  # (n-T+1, 11, T)
    return np.ascontiguousarray(view), rollout.dv_true[T - 1 :].copy()


def windowize(dataset: Dataset, T: int, purpose: str = "train") -> Windows:
    """Stride-1 windows inside each rollout; never across rollout boundaries.

    With ``purpose="train"`` rollouts of unseen trajectory kinds are refused.
    """
    if purpose not in ("train", "eval"):
        raise ValueError("purpose must be 'train' or 'eval'")
    feats, targs, rid, end = [], [], [], []
    for i, r in enumerate(dataset.rollouts):
        if purpose == "train" and r.kind not in TRAIN_KINDS:
            raise UnseenTrajectoryError(f"rollout {i} ({r.kind.value}) is reserved for evaluation")
        f, y = rollout_windows(r, T)
        feats.append(f)
        targs.append(y)
        rid.append(np.full(len(y), i))
        end.append(np.arange(T - 1, len(r)))
    if not feats:
        raise EmptyDataset("dataset has no rollouts")
    return Windows(np.concatenate(feats), np.concatenate(targs), np.concatenate(rid), np.concatenate(end))


def fit_normalizer(windows: Windows, feature_floor=STD_FLOOR, target_floor=STD_FLOOR) -> NormStats:
    """Per-channel z-score statistics; stds are floored elementwise."""
    if len(windows) == 0:
        raise EmptyDataset("cannot fit normalization on an empty window set")
    f = windows.features
    return NormStats(
        f.mean(axis=(0, 2)),
        np.maximum(f.std(axis=(0, 2)), feature_floor),
        windows.targets.mean(axis=0),
        np.maximum(windows.targets.std(axis=0), target_floor),
    )


def apply_normalizer(windows: Windows, stats: NormStats) -> Windows:
    return Windows(
        stats.normalize_features(windows.features),
        stats.normalize_targets(windows.targets),
        windows.rollout_id,
        windows.end_index,
    )


# -- file format -------------------------------------------------------------

def _header(ds: Dataset) -> dict:
    winds = []
    for r in ds.rollouts:
        key = [list(r.wind.v_w), list(r.wind.drag_coeffs)]
        if key not in winds:
            winds.append(key)
    return {
        "dt": ds.dt,
        "T": ds.T,
        "seed": ds.seed,
        "columns": list(COLUMNS),
        "winds": winds,
        "rollouts": [
            {"kind": r.kind.value, "wind": list(r.wind.v_w), "drag": list(r.wind.drag_coeffs), "rows": len(r)}
            for r in ds.rollouts
        ],
    }


def _rows(r: FlightRollout) -> np.ndarray:
    return np.column_stack([r.t, r.states, r.inputs, r.dv_true])


def dataset_bytes(ds: Dataset) -> bytes:
    hb = json.dumps(_header(ds), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IQ", DATASET_VERSION, len(hb)))
    buf.write(hb)
    for r in ds.rollouts:
        buf.write(_rows(r).astype("<f8").tobytes())
    return buf.getvalue()


def save_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(dataset_bytes(ds))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:8] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    header = json.loads(data[20 : 20 + hlen])
    if header["columns"] != list(COLUMNS):
        raise FormatError(f"{path}: unexpected column schema")
    ncol = len(COLUMNS)
    body = np.frombuffer(data[20 + hlen :], dtype="<f8").astype(np.float64)
    total = sum(r["rows"] for r in header["rollouts"])
    if body.size != total * ncol:
        raise FormatError(f"{path}: body has {body.size} values, header implies {total * ncol}")
    body = body.reshape(total, ncol)
    rollouts, pos = [], 0
    for meta in header["rollouts"]:
        rows = body[pos : pos + meta["rows"]]
        pos += meta["rows"]
        rollouts.append(
            FlightRollout(
                TrajectoryKind(meta["kind"]),
                dyn.WindField(tuple(meta["wind"]), tuple(meta["drag"])),
                rows[:, 0].copy(),
                rows[:, 1:11].copy(),
                rows[:, 11:15].copy(),
                rows[:, 15:18].copy(),
            )
        )
    return Dataset(rollouts, dt=header["dt"], T=header["T"], seed=header["seed"])


def export_csv(path, ds: Dataset) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("rollout", "kind", *COLUMNS))
        for i, r in enumerate(ds.rollouts):
            for row in _rows(r):
                w.writerow((i, r.kind.value, *(repr(float(v)) for v in row)))
