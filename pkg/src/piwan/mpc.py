"""Nonlinear MPC by multiple shooting and Gauss-Newton SQP.

Decision variables are the full state trajectory ``X`` (H+1 states) and the
input sequence ``U`` (H inputs); dynamics enter as defect constraints
``x_{k+1} = model(x_k, u_k, dt)``. Each SQP iteration linearizes the model by
central finite differences, condenses the linearized defects into a dense QP
over input increments, solves it under the input box with a projected-Newton
box-QP, and globalizes with a backtracking line search on an l1 merit
function.

The solver is dimension generic: anything that maps ``(batch, nx)`` states and
``(batch, nu)`` inputs to ``(batch, nx)`` next states is a valid model. When
``MpcConfig.quaternion`` is set, the quaternion block of 10-d states is
renormalized between iterates.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import dynamics as dyn
from . import trajectories as traj
from .errors import HorizonMismatch, NonFiniteJacobian, SimulationError, SolverDiverged

log = logging.getLogger(__name__)

DiscreteModel = Callable[[np.ndarray, np.ndarray, float], np.ndarray]

DEFAULT_Q = (10.0, 10.0, 10.0, 5.0, 5.0, 5.0, 5.0, 1.0, 1.0, 1.0)
DEFAULT_R = (0.1, 0.2, 0.2, 0.2)


@dataclass
class MpcWeights:
    """Diagonal state, input and terminal weights."""

    Q: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_Q))
    R: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_R))
    Q_terminal: Optional[np.ndarray] = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.Q_terminal = self.Q.copy() if self.Q_terminal is None else np.asarray(self.Q_terminal, dtype=float)
        for name in ("Q", "R", "Q_terminal"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"weights {name} must be non-negative")
        if self.Q_terminal.shape != self.Q.shape:
            raise ValueError("Q_terminal must match Q")


@dataclass
class MpcConfig:
    H: int = 20
    dt: float = 0.02
    u_min: tuple = (2.0, -3.0, -3.0, -3.0)
    u_max: tuple = (20.0, 3.0, 3.0, 3.0)
    max_sqp_iters: int = 10
    kkt_tol: float = 1e-4
    ls_shrink: float = 0.5
    ls_armijo: float = 1e-4
    ls_min_step: float = 1e-6
    fd_step: float = 1e-6
    quaternion: bool = True

    def __post_init__(self):
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.u_min.shape != self.u_max.shape or np.any(self.u_min >= self.u_max):
            raise ValueError("u_min must be strictly below u_max componentwise")
        if self.kkt_tol <= 0:
            raise ValueError("kkt_tol must be positive")
        if self.max_sqp_iters < 1:
            raise ValueError("max_sqp_iters must be >= 1")


@dataclass
class MpcSolution:
    u0: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    cost: float
    kkt_residual: float
    iterations: int
    converged: bool = False
    used_warm_start: bool = False


# -- building blocks ---------------------------------------------------------

def _fd_jacobians(model, X, U, dt, step):
    """Central-difference Jacobians of ``model`` at each row of (X, U).

    Returns (F, A, B): F is model(X, U), A is (n, nx, nx), B is (n, nx, nu).
    """
    n, nx = X.shape
    nu = U.shape[1]
    nz = nx + nu
    Z = np.concatenate([X, U], axis=1)
    h = step * np.maximum(1.0, np.abs(Z))  # (n, nz)
    eye = np.eye(nz)
    pert = h[:, :, None] * eye[None]  # (n, nz, nz): row j perturbs coordinate j
    batch = np.concatenate([Z[:, None, :], Z[:, None, :] + pert, Z[:, None, :] - pert], axis=1)
    flat = batch.reshape(-1, nz)
    out = np.asarray(model(flat[:, :nx], flat[:, nx:], dt)).reshape(n, 1 + 2 * nz, nx)
    F = out[:, 0]
    with np.errstate(invalid="ignore", over="ignore"):
        J = (out[:, 1 : 1 + nz] - out[:, 1 + nz :]) / (2.0 * h[:, :, None])  # (n, nz, nx)
    J = np.swapaxes(J, 1, 2)
    if not np.all(np.isfinite(J)):
        raise NonFiniteJacobian("finite-difference Jacobian is not finite")
    return F, J[:, :, :nx], J[:, :, nx:]


def linearize_dynamics(model: DiscreteModel, x, u, dt: float = 0.02, step: float = 1e-6):
    """Jacobians of a discrete model at a single point.

    Returns ``(A, B, c)`` with ``c = model(x, u)`` so that
    ``model(x + dx, u + du) ≈ c + A dx + B du``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    F, A, B = _fd_jacobians(model, x, u, dt, step)
    return A[0], B[0], F[0]


def box_qp(Hm, g, lb, ub, x0=None, max_iter=100, tol=1e-12):
    """Minimize ``0.5 x'Hx + g'x`` subject to ``lb <= x <= ub`` (H positive definite).

    Projected Newton with a free/clamped split: the Newton step is taken on
    the free set, then a projected Armijo backtracking search keeps iterates
    feasible. Terminates when the free-set gradient vanishes.
    """
    n = len(g)
    x = np.zeros(n) if x0 is None else np.clip(x0, lb, ub)
    x = np.clip(x, lb, ub)
    f = 0.5 * x @ Hm @ x + g @ x
    for _ in range(max_iter):
        grad = g + Hm @ x
        clamped = ((x <= lb) & (grad > 0)) | ((x >= ub) & (grad < 0))
        free = ~clamped
        if not free.any():
            break
        gnorm = np.max(np.abs(grad[free]))
        if gnorm <= tol * (1.0 + np.max(np.abs(g))):
            break
        Hff = Hm[np.ix_(free, free)]
        try:
            L = np.linalg.cholesky(Hff)
        except np.linalg.LinAlgError:
            Hff = Hff + 1e-10 * np.eye(Hff.shape[0]) * max(1.0, np.trace(Hff) / Hff.shape[0])
            L = np.linalg.cholesky(Hff)
        step = np.zeros(n)
        step[free] = -np.linalg.solve(L.T, np.linalg.solve(L, grad[free]))
        alpha = 1.0
        while True:
            xn = np.clip(x + alpha * step, lb, ub)
            fn = 0.5 * xn @ Hm @ xn + g @ xn
            if fn <= f + 1e-4 * (grad @ (xn - x)) or alpha < 1e-12:
                break
            alpha *= 0.5
        moved = np.max(np.abs(xn - x))
        x, fprev, f = xn, f, fn
        if moved <= 1e-15 * (1.0 + np.max(np.abs(x))) and fprev - f <= 0:
            break
    return x


def stack_refs(refs):
    """Turn a horizon of ReferenceState (or an ``(x_ref, u_ref)`` pair) into arrays."""
    if isinstance(refs, tuple) and len(refs) == 2 and isinstance(refs[0], np.ndarray):
        return np.asarray(refs[0], float), np.asarray(refs[1], float)
    xr = np.stack([r.as_state() for r in refs])
    ur = np.stack([r.as_input() for r in refs])
    return xr, ur


def rollout(model: DiscreteModel, x0, U, dt: float) -> np.ndarray:
    fast = getattr(model, "rollout", None)
    if fast is not None:
        return fast(x0, U, dt)
    X = np.empty((len(U) + 1, len(x0)))
    X[0] = x0
    for k in range(len(U)):
        X[k + 1] = model(X[k][None], U[k][None], dt)[0]
    return X


def tracking_cost(X, U, xr, ur, w: MpcWeights) -> float:
    ex = X - xr[: len(X)]
    eu = U - ur[: len(U)]
    return float(
        np.sum(ex[:-1] ** 2 * w.Q) + np.sum(ex[-1] ** 2 * w.Q_terminal) + np.sum(eu**2 * w.R)
    )


def _renormalize(X):
    X = X.copy()
    X[:, dyn.Q] = dyn.quat_normalize(X[:, dyn.Q])
    return X


def shift_warm_start(sol: MpcSolution, model: DiscreteModel, dt: float):
    """One-step shift of a previous solution; the last input is repeated."""
    U = np.concatenate([sol.inputs[1:], sol.inputs[-1:]], axis=0)
    last = model(sol.states[-1][None], sol.inputs[-1][None], dt)[0]
    X = np.concatenate([sol.states[1:], last[None]], axis=0)
    return X, U


# -- the solver --------------------------------------------------------------

def solve(
    x_init,
    refs,
    model: DiscreteModel,
    cfg: MpcConfig,
    w: MpcWeights,
    warm_start: Optional[MpcSolution] = None,
) -> MpcSolution:
    """Solve one receding-horizon tracking problem.

    Parameters
    ----------
    x_init : (nx,) array
        Measured state.
    refs : list of ReferenceState or ``(x_ref, u_ref)``
        H+1 reference states; the first H reference inputs are used.
    model : callable
        Discrete dynamics ``model(x, u, dt)``, vectorized over rows.
    warm_start : MpcSolution, optional
        Previous solution; shifted by one step to seed the iterate.
    """
    H, dt = cfg.H, cfg.dt
    x_init = np.asarray(x_init, dtype=float)
    xr, ur = stack_refs(refs)
    if len(xr) != H + 1:
        raise HorizonMismatch(f"expected {H + 1} reference states, got {len(xr)}")
    if not np.all(np.isfinite(x_init)):
        raise ValueError("x_init must be finite")
    ur = ur[:H]
    nx, nu = len(x_init), ur.shape[1]
    if w.Q.shape != (nx,) or w.R.shape != (nu,):
        raise HorizonMismatch("weight sizes do not match state/input dimensions")
    lb_u = np.broadcast_to(cfg.u_min, (H, nu))
    ub_u = np.broadcast_to(cfg.u_max, (H, nu))
    quat = cfg.quaternion and nx == dyn.NX

    ws = None
    if warm_start is not None:
        X, U = shift_warm_start(warm_start, model, dt)
        U = np.clip(U, lb_u, ub_u)
        ws = U.copy()
    else:
        U = np.clip(ur, lb_u, ub_u).copy()
        X = rollout(model, x_init, U, dt)

    wdiag = np.concatenate([np.tile(w.Q, H - 1), w.Q_terminal])  # weights for x_1..x_H
    Wk = np.vstack([np.broadcast_to(w.Q, (H, nx)), w.Q_terminal[None]])  # x_0..x_H
    Rbar = np.tile(w.R, H)
    mu = 1.0
    kkt = np.inf
    converged = False
    it = 0

    def merit(X, U, mu):
        F = model(X[:-1], U, dt)
        viol = np.sum(np.abs(x_init - X[0])) + np.sum(np.abs(F - X[1:]))
        return tracking_cost(X, U, xr, ur, w) + mu * viol

    for it in range(cfg.max_sqp_iters + 1):
        F, A, B = _fd_jacobians(model, X[:-1], U, dt, cfg.fd_step)
        d0 = x_init - X[0]
        d = F - X[1:]

        # stationarity via the costate of the current iterate
        ex = X - xr
        lam = 2.0 * Wk[H] * ex[H]
        grad_u = np.empty((H, nu))
        for k in range(H - 1, -1, -1):
            grad_u[k] = 2.0 * w.R * (U[k] - ur[k]) + B[k].T @ lam
            lam = 2.0 * Wk[k] * ex[k] + A[k].T @ lam
        stat = np.max(np.abs(U - np.clip(U - grad_u, lb_u, ub_u)))
        prim = max(np.max(np.abs(d0)), np.max(np.abs(d)))
        kkt = max(stat, prim)
        if kkt <= cfg.kkt_tol:
            converged = True
            break
        if it == cfg.max_sqp_iters:
            break

        # condense: dx_{k+1} = g_k + M_k dU
        M = np.zeros((H, nx, H * nu))
        gvec = np.empty((H, nx))
        prev_g = d0
        for k in range(H):
            if k > 0:
                M[k] = A[k] @ M[k - 1]
            M[k][:, k * nu : (k + 1) * nu] = B[k]
            prev_g = A[k] @ prev_g + d[k]
            gvec[k] = prev_g
        Mf = M.reshape(H * nx, H * nu)
        e0 = (X[1:] + gvec - xr[1:]).reshape(-1)
        MW = Mf.T * wdiag
        Hq = 2.0 * (MW @ Mf + np.diag(Rbar))
        gq = 2.0 * (MW @ e0 + Rbar * (U - ur).reshape(-1))
        dU = box_qp(Hq, gq, (lb_u - U).reshape(-1), (ub_u - U).reshape(-1))
        dX = np.empty_like(X)
        dX[0] = d0
        dX[1:] = gvec + (Mf @ dU).reshape(H, nx)
        dU = dU.reshape(H, nu)

        # multiplier estimate for the merit penalty
        exn = X + dX - xr
        lam = 2.0 * Wk[H] * exn[H]
        lam_max = np.max(np.abs(lam))
        for k in range(H - 1, 0, -1):
            lam = 2.0 * Wk[k] * exn[k] + A[k].T @ lam
            lam_max = max(lam_max, np.max(np.abs(lam)))
        mu = max(mu, 2.0 * lam_max + 1.0)

        viol0 = np.sum(np.abs(d0)) + np.sum(np.abs(d))
        gradJ = np.sum(2.0 * Wk * (X - xr) * dX) + np.sum(2.0 * w.R * (U - ur) * dU)
        slope = gradJ - mu * viol0
        phi0 = tracking_cost(X, U, xr, ur, w) + mu * viol0
        if slope >= -1e-14 * (1.0 + abs(phi0)):
            converged = True
            break
        alpha = 1.0
        while True:
            Xn = X + alpha * dX
            if quat:
                Xn = _renormalize(Xn)
            Un = np.clip(U + alpha * dU, lb_u, ub_u)
            phin = merit(Xn, Un, mu)
            if phin <= phi0 + cfg.ls_armijo * alpha * slope:
                break
            alpha *= cfg.ls_shrink
            if alpha < cfg.ls_min_step:
                if phi0 - phin > -1e-9 * (1.0 + abs(phi0)):
                    break
                raise SolverDiverged(
                    f"merit increased at minimum step (phi0={phi0:.6g}, phi={phin:.6g})"
                )
        X, U = Xn, Un

    # shooting-consistent output: states are the nonlinear rollout of U
    Xout = rollout(model, x_init, U, dt)
    cost = tracking_cost(Xout, U, xr, ur, w)
    used_ws = False
    if ws is not None:
        Xws = rollout(model, x_init, ws, dt)
        cost_ws = tracking_cost(Xws, ws, xr, ur, w)
        if cost_ws < cost:
            Xout, U, cost, used_ws = Xws, ws, cost_ws, True
    return MpcSolution(
        u0=U[0].copy(),
        states=Xout,
        inputs=U,
        cost=cost,
        kkt_residual=float(kkt),
        iterations=it,
        converged=converged,
        used_warm_start=used_ws,
    )


# -- closed loop -------------------------------------------------------------

@dataclass
class TrackLog:
    spec: traj.TrajectorySpec
    wind: dyn.WindField
    rollout: dyn.Rollout
    ref_positions: np.ndarray
    rmse: float
    sqp_iterations: np.ndarray
    estimates: np.ndarray
    wall_time: float


def tracking_rmse(positions, ref_positions) -> float:
    """Root of the mean squared 3-D position error."""
    err = np.asarray(positions) - np.asarray(ref_positions)
    return float(np.sqrt(np.mean(np.sum(err**2, axis=-1))))


class _RecedingHorizon:
    """Controller callable for :func:`dynamics.simulate`."""

    def __init__(self, spec, model, cfg: MpcConfig, w: MpcWeights):
        self.spec = spec
        self.cfg = cfg
        self.w = w
        self.compensator = model if hasattr(model, "current_model") else None
        self.static_model = dyn.OffsetModel() if model is None else model
        self.prev = None
        self.warm = None
        self.iterations = []
        self.estimates = []

    def __call__(self, t, x):
        if self.compensator is not None:
            if self.prev is not None:
                self.compensator.observe(*self.prev)
            model = self.compensator.current_model(t, x)
            self.estimates.append(np.array(self.compensator.last_estimate))
        else:
            model = self.static_model
        refs = traj.horizon_arrays(self.spec, t, self.cfg.H, self.cfg.dt)
        sol = solve(x, refs, model, self.cfg, self.w, self.warm)
        self.warm = sol
        self.iterations.append(sol.iterations)
        self.prev = (t, x.copy(), sol.u0.copy())
        return sol.u0


def track(kind, model, wind: dyn.WindField, cfg: MpcConfig, w: MpcWeights, duration: float = 20.0,
          x0=None) -> TrackLog:
    """Closed-loop receding-horizon tracking of a reference on the wind plant.

    ``model`` is ``None`` (nominal), a discrete model callable, or a
    compensator exposing ``current_model(t, x)`` and ``observe(t, x, u)``.
    """
    spec = kind if isinstance(kind, traj.TrajectorySpec) else traj.TrajectorySpec(kind)
    ctrl = _RecedingHorizon(spec, model, cfg, w)
    x0 = traj.initial_state(spec) if x0 is None else np.asarray(x0, float)
    t0 = time.perf_counter()
    try:
        ro = dyn.simulate(x0, ctrl, wind, duration, cfg.dt)
    except SimulationError as exc:
        exc.tag = f"{spec.kind.value} wind={wind.v_w[:2]}"
        raise
    wall = time.perf_counter() - t0
    pr, _ = traj.position_velocity(spec, ro.t)
    return TrackLog(
        spec=spec,
        wind=wind,
        rollout=ro,
        ref_positions=pr,
        rmse=tracking_rmse(ro.states[:, dyn.P], pr),
        sqp_iterations=np.array(ctrl.iterations),
        estimates=np.array(ctrl.estimates) if ctrl.estimates else np.zeros((0, 3)),
        wall_time=wall,
    )
