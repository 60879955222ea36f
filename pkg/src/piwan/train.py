"""Training under the combined supervised + physics-informed loss.

Both loss terms are mean squared errors over the batch and the three output
components, measured in normalized target units. The physics term compares
predictions on synthetic collocation windows against the nominal model's
velocity derivative at each window's last frame. Collocation windows are
short nominal-model rollouts from random (attitude, velocity, input) samples
with the input held, so they are valid histories for the sequence model.

Collocation modes:

``off``        supervised only (plain TCN baseline)
``fixed``      one collocation set drawn before training
``resampled``  a fresh set every ``resample_period`` epochs
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .data import PHYSICAL_FEATURE_FLOOR, PHYSICAL_TARGET_FLOOR, Windows, fit_normalizer
from .errors import EmptyDataset, NonFiniteLoss, ShapeMismatch
from .net import ModelParams, NetConfig, forward_batch, init_params, value_and_backward

log = logging.getLogger(__name__)

COLLOCATION_MODES = ("off", "fixed", "resampled")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 0.01
    collocation: str = "resampled"
    n_colloc: int = 2048
    resample_period: int = 10
    val_fraction: float = 0.1
    physical_floor: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.resample_period < 1:
            raise ValueError("resample_period must be >= 1")
        if self.collocation not in COLLOCATION_MODES:
            raise ValueError(f"collocation must be one of {COLLOCATION_MODES}")
        if self.epochs < 0 or self.n_colloc < 1:
            raise ValueError("epochs must be >= 0 and n_colloc >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class CollocationSet:
    features: np.ndarray  # (n, 11, T), physical units
    targets: np.ndarray  # (n, 3), nominal velocity derivative at the last frame
    states: np.ndarray  # (n, T, 10)
    inputs: np.ndarray  # (n, 4), held over the window
    seed: int = 0

    def __len__(self) -> int:
        return len(self.targets)


def random_attitudes(rng: np.random.Generator, n: int, max_angle: float) -> np.ndarray:
    """Haar-uniform unit quaternions restricted to ``angle <= max_angle`` (rejection sampling)."""
    out = np.empty((0, 4))
    while len(out) < n:
        q = rng.standard_normal((max(4096, 64 * (n - len(out))), 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        q *= np.where(q[:, :1] < 0, -1.0, 1.0)
        out = np.concatenate([out, q[dyn.quat_angle(q) <= max_angle]])
    return out[:n]


def sample_collocation(n: int, seed: int, T: int = 20, dt: float = 0.02,
                       max_tilt_deg: float = 30.0, v_max: float = 3.0,
                       thrust=(5.0, 15.0), rate_max: float = 2.0) -> CollocationSet:
    """Random nominal-model windows covering a broad state-input box."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    q = random_attitudes(rng, n, np.deg2rad(max_tilt_deg))
    v = rng.uniform(-v_max, v_max, (n, 3))
    u = np.column_stack([rng.uniform(*thrust, n), rng.uniform(-rate_max, rate_max, (n, 3))])
    x = np.zeros((n, dyn.NX))
    x[:, dyn.Q] = q
    x[:, dyn.V] = v
    states = np.empty((n, T, dyn.NX))
    states[:, 0] = x
    for k in range(1, T):
        states[:, k] = dyn.nominal_step(states[:, k - 1], u, dt)
    feats = np.concatenate(
        [states[:, :, dyn.Q], states[:, :, dyn.V], np.broadcast_to(u[:, None, :], (n, T, 4))], axis=2
    )
    targets = dyn.nominal_derivative(states[:, -1], u)[:, dyn.V]
    return CollocationSet(np.ascontiguousarray(feats.transpose(0, 2, 1)), targets, states, u, seed)


def _mse_cotangent(labels: np.ndarray, std: np.ndarray):
    n = labels.shape[0]
    scale = 1.0 / (n * labels.shape[1])

    def fn(pred):
        r = (pred - labels) / std
        return float(scale * np.sum(r * r)), 2.0 * scale * r / std

    return fn


def _batch_loss(params: ModelParams, features_norm, labels):
    f = np.asarray(features_norm, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(f) == 0:
        raise EmptyDataset("empty batch")
    if y.shape != (len(f), 3):
        raise ShapeMismatch(f"labels must have shape ({len(f)}, 3), got {y.shape}")
    value, grad, _ = value_and_backward(params, f, _mse_cotangent(y, params.norm.target_std))
    return value, grad


def supervised_loss(params: ModelParams, features_norm, labels):
    """MSE between labels (m/s^2) and predictions, in normalized target units.

    Returns ``(loss, gradient)``.
    """
    return _batch_loss(params, features_norm, labels)


def physics_loss(params: ModelParams, colloc: CollocationSet | tuple):
    """MSE between predictions on collocation windows and their nominal targets."""
    if isinstance(colloc, CollocationSet):
        feats, targets = params.norm.normalize_features(colloc.features), colloc.targets
    else:
        feats, targets = colloc
    return _batch_loss(params, feats, targets)


def combined_loss(params: ModelParams, features_norm, labels, colloc=None, lam: float = 0.0):
    """``L_SL + lam * L_PI`` with its gradient.

    ``colloc`` is ``None`` (supervised only) or a ``(features_norm, targets)``
    pair. Returns ``(total, l_sl, l_pi, gradient)``.
    """
    l_sl, g = supervised_loss(params, features_norm, labels)
    l_pi = 0.0
    if colloc is not None:
        l_pi, g_pi = physics_loss(params, colloc)
        g = g + lam * g_pi
    return l_sl + lam * l_pi, l_sl, l_pi, g


class Adam:
    def __init__(self, n: int, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class EpochLog:
    epoch: int
    l_sl: float
    l_pi: float
    val_rmse: float
    wall_time: float
    resampled: bool


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog]
    initial_val_loss: float
    final_val_loss: float
    colloc_seeds: list = field(default_factory=list)


def colloc_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 7919, epoch]).generate_state(1)[0])


def prediction_rmse_arrays(pred, labels) -> float:
    return float(np.sqrt(np.mean(np.sum((np.asarray(pred) - np.asarray(labels)) ** 2, axis=1))))


def fit(windows: Windows, cfg: TrainConfig, net_cfg: NetConfig = NetConfig(),
        dt: float = 0.02, callback=None) -> TrainResult:
    """Train a model with Adam over shuffled mini-batches of the combined loss."""
    if len(windows) == 0:
        raise EmptyDataset("no training windows")
    if windows.features.shape[2] != net_cfg.T:
        raise ShapeMismatch(f"windows have T={windows.features.shape[2]}, network expects {net_cfg.T}")
    split_rng = np.random.default_rng([cfg.seed, 1])
    perm = split_rng.permutation(len(windows))
    n_val = int(round(cfg.val_fraction * len(windows)))
    val, tr = windows.subset(np.sort(perm[:n_val])), windows.subset(np.sort(perm[n_val:]))
    if cfg.physical_floor:
        norm = fit_normalizer(tr, PHYSICAL_FEATURE_FLOOR, PHYSICAL_TARGET_FLOOR)
    else:
        norm = fit_normalizer(tr)
    params = init_params(net_cfg, norm, seed=cfg.seed)
    x_tr = norm.normalize_features(tr.features)
    y_tr = tr.targets
    x_val = norm.normalize_features(val.features) if n_val else None

    def val_loss(p):
        if not n_val:
            return float("nan"), float("nan")
        pred = forward_batch(p, x_val)
        r = (pred - val.targets) / p.norm.target_std
        return float(np.mean(r * r)), prediction_rmse_arrays(pred, val.targets)

    initial_val, _ = val_loss(params)
    opt = Adam(params.theta.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    theta = params.theta.copy()
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    use_pi = cfg.collocation != "off"
    colloc_feats = colloc_targets = None
    colloc_rng = np.random.default_rng([cfg.seed, 3])
    colloc_order, colloc_pos = None, 0
    seeds_used = []
    history: list[EpochLog] = []
    t_start = time.perf_counter()
    B = cfg.batch_size

    for epoch in range(cfg.epochs):
        resampled = False
        if use_pi and (
            colloc_feats is None or (cfg.collocation == "resampled" and epoch % cfg.resample_period == 0)
        ):
            s = colloc_seed(cfg.seed, epoch)
            cs = sample_collocation(cfg.n_colloc, s, T=net_cfg.T, dt=dt)
            colloc_feats, colloc_targets = norm.normalize_features(cs.features), cs.targets
            colloc_order, colloc_pos = colloc_rng.permutation(len(cs)), 0
            seeds_used.append((epoch, s))
            resampled = True
        order = shuffle_rng.permutation(len(y_tr))
        sl_sum = pi_sum = 0.0
        nb = 0
        for start in range(0, len(order), B):
            idx = order[start : start + B]
            p = params.with_theta(theta)
            colloc = None
            if use_pi:
                if colloc_pos + len(idx) > len(colloc_order):
                    colloc_order, colloc_pos = colloc_rng.permutation(len(colloc_order)), 0
                cidx = colloc_order[colloc_pos : colloc_pos + min(len(idx), len(colloc_order))]
                colloc_pos += len(cidx)
                colloc = (colloc_feats[cidx], colloc_targets[cidx])
            total, l_sl, l_pi, g = combined_loss(p, x_tr[idx], y_tr[idx], colloc, cfg.lam)
            if not np.isfinite(total) or not np.all(np.isfinite(g)):
                raise NonFiniteLoss(epoch)
            theta = opt.step(theta, g)
            sl_sum += l_sl
            pi_sum += l_pi
            nb += 1
        params = params.with_theta(theta)
        _, vr = val_loss(params)
        entry = EpochLog(epoch, sl_sum / nb, pi_sum / nb, vr, time.perf_counter() - t_start, resampled)
        history.append(entry)
        if callback is not None:
            callback(entry)
        log.debug("epoch %d L_SL=%.5g L_PI=%.5g val_rmse=%.5g", epoch, entry.l_sl, entry.l_pi, vr)
    final_val, _ = val_loss(params)
    return TrainResult(params, history, initial_val, final_val, seeds_used)


def write_log(path, entries: list[EpochLog]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("epoch", "L_SL", "L_PI", "val_RMSE", "wall_time", "resampled"))
        for e in entries:
            w.writerow((e.epoch, repr(e.l_sl), repr(e.l_pi), repr(e.val_rmse), f"{e.wall_time:.3f}", int(e.resampled)))
