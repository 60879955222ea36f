"""Quadrotor rigid-body model, RK4 integration and the wind-augmented plant.

State vectors are flat ``(..., 10)`` arrays laid out as ``[p(3), q(4), v(3)]``
with the quaternion in Hamilton ``(w, x, y, z)`` order, body-to-world. World
frame is z-up. Control vectors are ``(..., 4)``: ``[t_mn, wx, wy, wz]``.
Every function here broadcasts over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .errors import NonFiniteState, NonUnitQuaternion, SimulationError

GRAVITY = 9.81
NX = 10
NU = 4

P = slice(0, 3)
Q = slice(3, 7)
V = slice(7, 10)

HOVER_INPUT = np.array([GRAVITY, 0.0, 0.0, 0.0])
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
DEFAULT_DRAG = (0.3, 0.3, 0.15)

Derivative = Callable[[np.ndarray, np.ndarray], np.ndarray]
DiscreteModel = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class WindField:
    """Constant wind with linear drag on relative airspeed."""

    v_w: tuple[float, float, float] = (0.0, 0.0, 0.0)
    drag_coeffs: tuple[float, float, float] = DEFAULT_DRAG

    def __post_init__(self):
        object.__setattr__(self, "v_w", tuple(float(c) for c in self.v_w))
        object.__setattr__(self, "drag_coeffs", tuple(float(c) for c in self.drag_coeffs))
        if len(self.v_w) != 3 or len(self.drag_coeffs) != 3:
            raise ValueError("wind and drag must be 3-vectors")
        if any(d < 0 for d in self.drag_coeffs):
            raise ValueError("drag coefficients must be non-negative")

    @classmethod
    def xy(cls, wx: float, wy: float, drag: Sequence[float] = DEFAULT_DRAG) -> "WindField":
        return cls((wx, wy, 0.0), tuple(drag))

    def drag_accel(self, v: np.ndarray) -> np.ndarray:
        """Acceleration ``-D (v - v_w)`` for velocities ``(..., 3)``."""
        return -np.asarray(self.drag_coeffs) * (np.asarray(v) - np.asarray(self.v_w))


def make_state(p=(0.0, 0.0, 0.0), q=IDENTITY_QUAT, v=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.empty(NX)
    x[P] = p
    x[Q] = q
    x[V] = v
    return x


def hover_state(p=(0.0, 0.0, 1.0)) -> np.ndarray:
    return make_state(p=p)


# -- quaternion algebra ------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` of ``(..., 4)`` quaternions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (body-to-world) of a unit quaternion, shape ``(..., 3, 3)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_angle(q: np.ndarray) -> np.ndarray:
    """Rotation angle of a unit quaternion in radians, in ``[0, pi]``."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arccos(np.clip(np.abs(q[..., 0]), 0.0, 1.0))


# -- continuous dynamics -----------------------------------------------------

def _check_unit(q: np.ndarray, tol: float = 1e-3) -> None:
    dev = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
    if np.any(dev > tol):
        raise NonUnitQuaternion(f"quaternion norm deviates from 1 by {float(np.max(dev)):.3e}")


def _nominal_dot(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    # Unchecked kernel: RK4 stages see slightly non-unit quaternions by design.
    q = x[..., Q]
    w, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    t = u[..., 0]
    ox, oy, oz = u[..., 1], u[..., 2], u[..., 3]
    dx = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (NX,)))
    dx[..., P] = x[..., V]
    # 0.5 * q ⊗ (0, omega)
    dx[..., 3] = 0.5 * (-qx * ox - qy * oy - qz * oz)
    dx[..., 4] = 0.5 * (w * ox + qy * oz - qz * oy)
    dx[..., 5] = 0.5 * (w * oy - qx * oz + qz * ox)
    dx[..., 6] = 0.5 * (w * oz + qx * oy - qy * ox)
    # R(q) @ (0, 0, t) - g e_z
    dx[..., 7] = 2.0 * (qx * qz + w * qy) * t
    dx[..., 8] = 2.0 * (qy * qz - w * qx) * t
    dx[..., 9] = (1.0 - 2.0 * (qx * qx + qy * qy)) * t - GRAVITY
    return dx


def nominal_derivative(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Nominal rigid-body derivative ``[v, 0.5 q ⊗ (0, ω), R(q) t e_z - g e_z]``.

    Raises :class:`NonUnitQuaternion` when ``|‖q‖ - 1| > 1e-3``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_unit(x[..., Q])
    return _nominal_dot(x, u)


def _plant_dot(x: np.ndarray, u: np.ndarray, wind: WindField) -> np.ndarray:
    dx = _nominal_dot(x, u)
    dx[..., V] += wind.drag_accel(x[..., V])
    return dx


def plant_derivative(x: np.ndarray, u: np.ndarray, wind: WindField) -> np.ndarray:
    """Ground-truth derivative: nominal plus ``-D (v - v_w)`` on the velocity rows."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_unit(x[..., Q])
    return _plant_dot(x, u, wind)


def plant_field(wind: WindField) -> Derivative:
    return lambda x, u: _plant_dot(x, u, wind)


def offset_field(accel: np.ndarray) -> Derivative:
    """Nominal dynamics with a constant velocity-derivative offset."""
    accel = np.asarray(accel, dtype=float)

    def f(x, u):
        dx = _nominal_dot(x, u)
        dx[..., V] += accel
        return dx

    return f


# -- integration -------------------------------------------------------------

def rk4_step(f: Derivative, x: np.ndarray, u: np.ndarray, dt: float, *, normalize: bool = True) -> np.ndarray:
    """One classical RK4 step with ``u`` held constant.

    For 10-dimensional states the quaternion block is renormalized afterwards;
    other state sizes (test ODEs) are integrated as-is.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if normalize and out.shape[-1] == NX:
        out[..., Q] = quat_normalize(out[..., Q])
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("RK4 step produced a non-finite state")
    return out


def nominal_step(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Discrete nominal model: RK4 of the nominal dynamics."""
    return rk4_step(_nominal_dot, x, u, dt)


def plant_step(x: np.ndarray, u: np.ndarray, dt: float, wind: WindField) -> np.ndarray:
    return rk4_step(plant_field(wind), x, u, dt)


@numba.njit(cache=True)
def _offset_dot(x, u, accel, out):
    w, qx, qy, qz = x[3], x[4], x[5], x[6]
    t, ox, oy, oz = u[0], u[1], u[2], u[3]
    out[0] = x[7]
    out[1] = x[8]
    out[2] = x[9]
    out[3] = 0.5 * (-qx * ox - qy * oy - qz * oz)
    out[4] = 0.5 * (w * ox + qy * oz - qz * oy)
    out[5] = 0.5 * (w * oy - qx * oz + qz * ox)
    out[6] = 0.5 * (w * oz + qx * oy - qy * ox)
    out[7] = 2.0 * (qx * qz + w * qy) * t + accel[0]
    out[8] = 2.0 * (qy * qz - w * qx) * t + accel[1]
    out[9] = (1.0 - 2.0 * (qx * qx + qy * qy)) * t - 9.81 + accel[2]


@numba.njit(cache=True)
def _offset_rollout(x0, U, dt, accel):
    n = U.shape[0]
    X = np.empty((n + 1, 10))
    X[0] = x0
    k1 = np.empty(10)
    k2 = np.empty(10)
    k3 = np.empty(10)
    k4 = np.empty(10)
    tmp = np.empty(10)
    for k in range(n):
        x = X[k]
        u = U[k]
        _offset_dot(x, u, accel, k1)
        for i in range(10):
            tmp[i] = x[i] + 0.5 * dt * k1[i]
        _offset_dot(tmp, u, accel, k2)
        for i in range(10):
            tmp[i] = x[i] + 0.5 * dt * k2[i]
        _offset_dot(tmp, u, accel, k3)
        for i in range(10):
            tmp[i] = x[i] + dt * k3[i]
        _offset_dot(tmp, u, accel, k4)
        for i in range(10):
            X[k + 1, i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        nq = np.sqrt(X[k + 1, 3] ** 2 + X[k + 1, 4] ** 2 + X[k + 1, 5] ** 2 + X[k + 1, 6] ** 2)
        for i in range(3, 7):
            X[k + 1, i] /= nq
    return X


class OffsetModel:
    """Discrete nominal model with a constant velocity-derivative offset.

    ``OffsetModel()`` is the plain nominal RK4 model. The ``rollout`` method is
    a compiled sequential path used by the MPC for shooting-consistent
    trajectories; ``__call__`` is the vectorized numpy path.
    """

    def __init__(self, accel=(0.0, 0.0, 0.0)):
        self.accel = np.asarray(accel, dtype=float).copy()
        self.accel.setflags(write=False)
        self._field = _nominal_dot if not np.any(self.accel) else offset_field(self.accel)

    def __call__(self, x, u, dt):
        return rk4_step(self._field, x, u, dt)

    def rollout(self, x0, U, dt):
        X = _offset_rollout(np.ascontiguousarray(x0, dtype=float),
                            np.ascontiguousarray(U, dtype=float), float(dt), self.accel)
        if not np.all(np.isfinite(X)):
            raise NonFiniteState("rollout produced a non-finite state")
        return X

    def __repr__(self):
        return f"OffsetModel(accel={self.accel.tolist()})"


# -- rollouts ----------------------------------------------------------------

@dataclass
class Rollout:
    """Synchronously recorded states, inputs and true plant derivatives."""

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    derivs: np.ndarray
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)


def n_steps(duration: float, dt: float) -> int:
    n = duration / dt
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-9 * max(1.0, n):
        raise ValueError(f"duration {duration} is not an integral multiple of dt {dt}")
    return k


def simulate(x0, controller, wind: WindField, duration: float, dt: float) -> Rollout:
    """Roll the plant forward under ``controller(t, x) -> u``.

    Each record holds the state at step k, the input applied over
    ``[t_k, t_k + dt)`` and the plant derivative at ``(x_k, u_k)`` taken
    before integration.
    """
    steps = n_steps(duration, dt)
    f = plant_field(wind)
    x = np.array(x0, dtype=float)
    ts = np.arange(steps) * dt
    states = np.empty((steps, NX))
    inputs = np.empty((steps, NU))
    derivs = np.empty((steps, NX))
    for k in range(steps):
        t = float(ts[k])
        try:
            u = np.asarray(controller(t, x), dtype=float)
            states[k] = x
            inputs[k] = u
            derivs[k] = f(x, u)
            x = rk4_step(f, x, u, dt)
        except SimulationError:
            raise
        except Exception as exc:
            raise SimulationError(t, exc) from exc
    return Rollout(ts, states, inputs, derivs)
