"""Disturbance estimation from a learned model and the corrected MPC dynamics.

The disturbance estimate is the mean, over the last ``N_T`` recorded steps,
of (learned velocity derivative - nominal velocity derivative). The corrected
model adds ``gains * f_w`` to the nominal velocity derivative and is
integrated with RK4; ``f_w`` is held constant for one MPC solve.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .errors import HistoryNotWarm
from .net import ModelParams, predict_raw


@dataclass(frozen=True)
class AdapterConfig:
    N_T: int = 10
    gains: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        object.__setattr__(self, "gains", tuple(float(g) for g in self.gains))
        if self.N_T < 1:
            raise ValueError("N_T must be >= 1")
        if len(self.gains) != 3 or any(not 0.0 <= g <= 1.0 for g in self.gains):
            raise ValueError("gains must be three values in [0, 1]")


class ControlHistory:
    """Ring buffer of the most recent (t, state, input) triples, contiguous at ``dt``."""

    def __init__(self, capacity: int, dt: float):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dt = dt
        self._buf: deque = deque(maxlen=capacity)

    @classmethod
    def for_model(cls, T: int, cfg: AdapterConfig, dt: float) -> "ControlHistory":
        # every one of the N_T averaged windows needs T frames of its own
        return cls(T + cfg.N_T - 1, dt)

    def push(self, t: float, x, u) -> None:
        if self._buf and abs(t - self._buf[-1][0] - self.dt) > 1e-9 * max(1.0, abs(t)):
            # a gap breaks contiguity; start over rather than mix time bases
            self._buf.clear()
        self._buf.append((float(t), np.array(x, dtype=float), np.array(u, dtype=float)))

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def full(self) -> bool:
        return len(self._buf) == self.capacity

    def arrays(self):
        t = np.array([e[0] for e in self._buf])
        x = np.stack([e[1] for e in self._buf])
        u = np.stack([e[2] for e in self._buf])
        return t, x, u


def estimate(params: ModelParams, hist: ControlHistory, cfg: AdapterConfig) -> np.ndarray:
    """Disturbance estimate ``f_w`` in m/s^2 from the most recent ``N_T`` steps."""
    T = params.config.T
    need = T + cfg.N_T - 1
    if not hist.full or len(hist) < need:
        raise HistoryNotWarm(f"history holds {len(hist)} of the {need} steps needed")
    _, x, u = hist.arrays()
    x, u = x[-need:], u[-need:]
    feats = np.concatenate([x[:, dyn.Q], x[:, dyn.V], u], axis=1)
    windows = np.lib.stride_tricks.sliding_window_view(feats, T, axis=0)  # (N_T, 11, T)
    learned = predict_raw(params, windows)
    nominal = dyn.nominal_derivative(x[T - 1 :], u[T - 1 :])[:, dyn.V]
    return np.mean(learned - nominal, axis=0)


def corrected_model(f_w, gains) -> dyn.OffsetModel:
    """Discrete corrected dynamics for a frozen disturbance estimate."""
    gains = np.asarray(gains, dtype=float)
    if not np.any(gains):
        return dyn.OffsetModel()
    return dyn.OffsetModel(gains * np.asarray(f_w, dtype=float))


def corrected_dynamics(params: ModelParams, hist: ControlHistory, cfg: AdapterConfig) -> dyn.OffsetModel:
    """RK4 model of ``f_nom + gains * f_w(history)`` with ``f_w`` frozen."""
    if not any(cfg.gains):
        if not hist.full:
            raise HistoryNotWarm("history is not full")
        return dyn.OffsetModel()
    return corrected_model(estimate(params, hist, cfg), cfg.gains)


class LearnedCompensator:
    """Feeds the MPC a corrected model built from a learned network and the flight history.

    Until the history is warm the plain nominal model is used.
    """

    def __init__(self, params: ModelParams, cfg: AdapterConfig, dt: float):
        self.params = params
        self.cfg = cfg
        self.history = ControlHistory.for_model(params.config.T, cfg, dt)
        self.last_estimate = np.zeros(3)

    def observe(self, t: float, x, u) -> None:
        self.history.push(t, x, u)

    def current_model(self, t: float, x) -> dyn.OffsetModel:
        if not self.history.full:
            return dyn.OffsetModel()
        self.last_estimate = estimate(self.params, self.history, self.cfg)
        return corrected_model(self.last_estimate, self.cfg.gains)


class OracleCompensator:
    """Uses the plant's true drag at the current state as the disturbance estimate."""

    def __init__(self, wind: dyn.WindField, gains=(1.0, 1.0, 1.0)):
        self.wind = wind
        self.gains = np.asarray(gains, dtype=float)
        self.last_estimate = np.zeros(3)

    def observe(self, t, x, u) -> None:
        pass

    def current_model(self, t: float, x) -> dyn.OffsetModel:
        self.last_estimate = self.wind.drag_accel(np.asarray(x)[dyn.V])
        return corrected_model(self.last_estimate, self.gains)
