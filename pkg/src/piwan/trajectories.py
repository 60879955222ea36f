"""Analytic reference trajectories.

All seven families are closed-form in time so the reference velocity is the
exact derivative of the reference position. The reference attitude is level
(identity quaternion), body rates are zero and thrust is the hover value.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import GRAVITY, NU, NX, P, Q, V
from .errors import UnknownKind


class TrajectoryKind(str, enum.Enum):
    CIRCLE = "circle"
    ELLIPSE = "ellipse"
    LEMNISCATE = "lemniscate"
    TRANSPOSED_LEMNISCATE = "transposed_lemniscate"
    SPIRAL = "spiral"
    WARPED_ELLIPSE = "warped_ellipse"
    EXTENDED_LEMNISCATE = "extended_lemniscate"

    @classmethod
    def parse(cls, name) -> "TrajectoryKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {
            "lemniscate_t": "transposed_lemniscate",
            "lemniscate_e": "extended_lemniscate",
            "transposedlemniscate": "transposed_lemniscate",
            "extendedlemniscate": "extended_lemniscate",
            "warpedellipse": "warped_ellipse",
        }
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise UnknownKind(f"unknown trajectory kind {name!r}") from None


TRAIN_KINDS = (
    TrajectoryKind.CIRCLE,
    TrajectoryKind.ELLIPSE,
    TrajectoryKind.LEMNISCATE,
    TrajectoryKind.TRANSPOSED_LEMNISCATE,
    TrajectoryKind.SPIRAL,
)
UNSEEN_KINDS = (TrajectoryKind.WARPED_ELLIPSE, TrajectoryKind.EXTENDED_LEMNISCATE)
ALL_KINDS = TRAIN_KINDS + UNSEEN_KINDS
PERIODIC_KINDS = tuple(k for k in ALL_KINDS if k is not TrajectoryKind.SPIRAL)


@dataclass(frozen=True)
class TrajectorySpec:
    """A trajectory family together with its shape parameters."""

    kind: TrajectoryKind
    a: float = 2.0
    b: float = 1.5
    h: float = 1.0
    omega: float = 2.0 * np.pi / 20.0
    climb: float = 0.05
    warp: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", TrajectoryKind.parse(self.kind))
        if min(self.a, self.b, self.h) <= 0 or self.omega <= 0:
            raise ValueError("trajectory radii, height and angular rate must be positive")

    def with_params(self, **kw) -> "TrajectorySpec":
        return replace(self, **kw)


@dataclass(frozen=True)
class ReferenceState:
    p_r: np.ndarray
    v_r: np.ndarray
    q_r: np.ndarray
    omega_r: np.ndarray
    t_mn_r: float

    def as_state(self) -> np.ndarray:
        x = np.empty(NX)
        x[P] = self.p_r
        x[Q] = self.q_r
        x[V] = self.v_r
        return x

    def as_input(self) -> np.ndarray:
        return np.concatenate([[self.t_mn_r], self.omega_r])


def _as_spec(kind) -> TrajectorySpec:
    if isinstance(kind, TrajectorySpec):
        return kind
    return TrajectorySpec(TrajectoryKind.parse(kind))


def position_velocity(kind, t) -> tuple[np.ndarray, np.ndarray]:
    """Reference position and velocity at times ``t``; each ``(..., 3)``."""
    s = _as_spec(kind)
    t = np.asarray(t, dtype=float)
    w = s.omega
    c, sn = np.cos(w * t), np.sin(w * t)
    zero = np.zeros_like(t)
    h = np.full_like(t, s.h)
    k = s.kind
    if k in (TrajectoryKind.CIRCLE, TrajectoryKind.SPIRAL):
        x, y, dx, dy = s.a * c, s.a * sn, -s.a * w * sn, s.a * w * c
    elif k in (TrajectoryKind.ELLIPSE, TrajectoryKind.WARPED_ELLIPSE):
        x, y, dx, dy = s.a * c, s.b * sn, -s.a * w * sn, s.b * w * c
    elif k in (
        TrajectoryKind.LEMNISCATE,
        TrajectoryKind.TRANSPOSED_LEMNISCATE,
        TrajectoryKind.EXTENDED_LEMNISCATE,
    ):
        amp = 1.5 * s.a if k is TrajectoryKind.EXTENDED_LEMNISCATE else s.a
        # Lemniscate of Gerono: (cos, sin*cos) = (cos, sin(2wt)/2)
        x, y = amp * c, amp * sn * c
        dx, dy = -amp * w * sn, amp * w * np.cos(2.0 * w * t)
        if k is TrajectoryKind.TRANSPOSED_LEMNISCATE:
            x, y, dx, dy = y, x, dy, dx
    else:  # pragma: no cover - enum is closed
        raise UnknownKind(str(k))

    z, dz = h, zero
    if k is TrajectoryKind.SPIRAL:
        z, dz = s.h + s.climb * t, np.full_like(t, s.climb)
    elif k is TrajectoryKind.WARPED_ELLIPSE:
        z, dz = s.h + s.warp * np.sin(2.0 * w * t), 2.0 * w * s.warp * np.cos(2.0 * w * t)
    elif k is TrajectoryKind.EXTENDED_LEMNISCATE:
        z, dz = s.h + s.warp * sn, w * s.warp * c
    return np.stack([x, y, z], -1), np.stack([dx, dy, dz], -1)


def sample(kind, t: float) -> ReferenceState:
    if t < 0:
        raise ValueError("t must be non-negative")
    p, v = position_velocity(kind, t)
    return ReferenceState(p, v, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), GRAVITY)


def horizon(kind, t0: float, H: int, dt: float) -> list[ReferenceState]:
    """Reference states at ``t0, t0 + dt, ..., t0 + H dt``."""
    if H < 1:
        raise ValueError("H must be at least 1")
    return [sample(kind, t0 + i * dt) for i in range(H + 1)]


def reference_arrays(kind, times) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized references: states ``(N, 10)`` and inputs ``(N, 4)``."""
    times = np.asarray(times, dtype=float)
    p, v = position_velocity(kind, times)
    n = len(times)
    xr = np.zeros((n, NX))
    xr[:, P] = p
    xr[:, 3] = 1.0
    xr[:, V] = v
    ur = np.zeros((n, NU))
    ur[:, 0] = GRAVITY
    return xr, ur


def horizon_arrays(kind, t0: float, H: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    return reference_arrays(kind, t0 + dt * np.arange(H + 1))


def initial_state(kind) -> np.ndarray:
    """Start of a rollout: the reference at t=0 with matched velocity."""
    xr, _ = reference_arrays(kind, [0.0])
    return xr[0].copy()
