"""Receding-horizon MPC over an RK4-discretized model, and the closed loop.

The optimal-control problem is solved by single-shooting Gauss-Newton SQP:
roll the model out, linearize each RK4 step exactly, solve the resulting
box-constrained time-varying LQR subproblem with a Riccati sweep, then line
search on the true cost.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import NU, NX, DynamicsModel, KnodeMpcError, NumericalError, QuadParams, state_difference
from .integrators import dopri_interval, rk4_step
from .trajectory import Trajectory

ARMIJO = 1e-4


class InfeasibleBoundsError(KnodeMpcError, ValueError):
    pass


@dataclass(frozen=True)
class MpcConfig:
    N: int = 20
    dt_c: float = 0.02
    q_diag: tuple = (100.0,) * 3 + (10.0,) * 3 + (10.0,) * 3 + (1.0,) * 3
    r_diag: tuple = (0.1, 1.0, 1.0, 1.0)
    p_diag: tuple | None = None  # terminal weight, defaults to q_diag
    u_min: tuple | None = None  # None: (0, -0.1, -0.1, -0.1)
    u_max: tuple | None = None  # None: (2 m g, 0.1, 0.1, 0.1)
    x_min: tuple | None = None  # soft state box, entries may be -inf
    x_max: tuple | None = None
    rho: float = 1e3
    sqp_iters: int = 3
    kkt_tol: float = 1e-3
    max_backtracks: int = 12

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if not self.dt_c > 0:
            raise ValueError("dt_c must be positive")
        if len(self.q_diag) != NX or min(self.q_diag) < 0:
            raise ValueError("Q must be 12 nonnegative weights")
        if self.p_diag is not None and (len(self.p_diag) != NX or min(self.p_diag) < 0):
            raise ValueError("P must be 12 nonnegative weights")
        if len(self.r_diag) != NU or min(self.r_diag) <= 0:
            raise ValueError("R must be 4 positive weights")
        if self.sqp_iters < 1 or self.rho < 0:
            raise ValueError("sqp_iters must be >= 1 and rho >= 0")

    def bounds(self, p: QuadParams) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array(self.u_min if self.u_min is not None else (0.0, -0.1, -0.1, -0.1), dtype=float)
        hi = np.array(self.u_max if self.u_max is not None else (2 * p.m * p.g, 0.1, 0.1, 0.1), dtype=float)
        if lo.shape != (NU,) or hi.shape != (NU,) or np.any(lo > hi):
            raise InfeasibleBoundsError("input bounds must satisfy u_min <= u_max")
        return lo, hi

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(NX, -np.inf) if self.x_min is None else np.array(self.x_min, dtype=float)
        hi = np.full(NX, np.inf) if self.x_max is None else np.array(self.x_max, dtype=float)
        if np.any(lo > hi):
            raise InfeasibleBoundsError("state bounds must satisfy x_min <= x_max")
        return lo, hi

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class Reference:
    """Desired states on a uniform time grid."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if t.ndim != 1 or s.shape != (len(t), NX) or len(t) < 1:
            raise ValueError("reference needs times (K,) and states (K, 12)")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    def __len__(self):
        return len(self.times)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :3]

    @classmethod
    def constant(cls, x_ref, n: int, dt: float = 0.02) -> "Reference":
        return cls(dt * np.arange(n), np.tile(np.asarray(x_ref, dtype=float), (n, 1)))

    def window(self, t: float, N: int, dt_c: float) -> np.ndarray:
        """Reference states at ``t + i dt_c`` for ``i = 0..N``; times must hit the grid."""
        if len(self.times) == 1:
            return np.tile(self.states[0], (N + 1, 1))
        dt = self.times[1] - self.times[0]
        q = (t - self.times[0] + dt_c * np.arange(N + 1)) / dt
        idx = np.rint(q).astype(int)
        if np.any(np.abs(q - idx) > 1e-6):
            raise ValueError("reference grid does not align with the control grid")
        if idx[0] < 0 or idx[-1] >= len(self.times):
            raise ValueError("reference too short for the requested horizon")
        return self.states[idx]


@dataclass(frozen=True)
class MpcSolution:
    u_seq: np.ndarray
    x_seq: np.ndarray
    cost: float
    kkt_residual: float
    iterations: int
    converged: bool
    cost_history: tuple = field(default=())


def discretize(f, x, u, dt_c):
    """One RK4 step of the model ``f``; the discrete dynamics used by the MPC."""
    return rk4_step(f, x, u, dt_c)


def _rollout(f, x0, U, h):
    X = np.empty((len(U) + 1, NX))
    X[0] = x0
    for i, u in enumerate(U):
        X[i + 1] = rk4_step(f, X[i], u, h)
    return X


def rk4_jacobians(model: DynamicsModel, X, U, h):
    """Exact Jacobians of the RK4 map at each ``(X[i], U[i])``.

    Forward-mode chain rule through the four stages, using the model's
    continuous-time Jacobians evaluated at the stage points.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    n = len(X)
    k1 = model.derivative(X, U)
    p2 = X + 0.5 * h * k1
    k2 = model.derivative(p2, U)
    p3 = X + 0.5 * h * k2
    k3 = model.derivative(p3, U)
    p4 = X + h * k3
    A, B = model.jacobians(np.concatenate([X, p2, p3, p4]), np.concatenate([U, U, U, U]))
    A, B = A.reshape(4, n, NX, NX), B.reshape(4, n, NX, NU)
    # d(stage point)/d(x, u) and d(k)/d(x, u), kept as separate x and u blocks
    eye = np.broadcast_to(np.eye(NX), (n, NX, NX))
    Kx, Ku = A[0], B[0]
    sum_x, sum_u = Kx.copy(), Ku.copy()
    for j, c, w in ((1, 0.5, 2.0), (2, 0.5, 2.0), (3, 1.0, 1.0)):
        Sx = eye + c * h * Kx
        Su = c * h * Ku
        Kx = A[j] @ Sx
        Ku = A[j] @ Su + B[j]
        sum_x += w * Kx
        sum_u += w * Ku
    return eye + h / 6.0 * sum_x, h / 6.0 * sum_u


class _Problem:
    """Cost pieces of one MPC instance (half-scaled internally, reported unscaled)."""

    def __init__(self, x_ref, u_ref, cfg: MpcConfig, xlo, xhi):
        self.x_ref = x_ref
        self.u_ref = u_ref
        self.Q = np.asarray(cfg.q_diag, dtype=float)
        self.P = np.asarray(cfg.p_diag if cfg.p_diag is not None else cfg.q_diag, dtype=float)
        self.R = np.asarray(cfg.r_diag, dtype=float)
        self.rho = cfg.rho
        self.xlo, self.xhi = xlo, xhi
        self.soft = bool(np.any(np.isfinite(xlo)) or np.any(np.isfinite(xhi)))

    def _viol(self, X):
        return np.maximum(X - self.xhi, 0.0) - np.maximum(self.xlo - X, 0.0)

    def cost(self, X, U) -> float:
        e = state_difference(X, self.x_ref)
        du = U - self.u_ref
        J = np.sum(self.Q * e[:-1] ** 2) + np.sum(self.P * e[-1] ** 2) + np.sum(self.R * du**2)
        if self.soft:
            J += self.rho * np.sum(self._viol(X[1:]) ** 2)
        return float(J)

    def derivatives(self, X, U):
        """Gradients and Gauss-Newton Hessian diagonals of the half cost."""
        e = state_difference(X, self.x_ref)
        W = np.vstack([np.tile(self.Q, (len(U), 1)), self.P])
        lx = W * e
        lxx = W.copy()
        if self.soft:
            v = self._viol(X)
            v[0] = 0.0  # the initial state is fixed
            lx += self.rho * v
            lxx += self.rho * (v != 0.0)
        lu = self.R * (U - self.u_ref)
        return lx, lxx, lu


def _box_qp(H, g, lo, hi, iters=50):
    """Projected-Newton solve of ``min 0.5 x'Hx + g'x`` on ``lo <= x <= hi``.

    Returns the minimizer and the mask of variables left free.
    """
    x = np.linalg.solve(H, -g)
    if np.all(x >= lo) and np.all(x <= hi):
        return x, np.ones(len(g), dtype=bool)
    x = np.clip(x, lo, hi)
    val = 0.5 * x @ H @ x + g @ x
    free = np.ones(len(g), dtype=bool)
    for _ in range(iters):
        grad = H @ x + g
        free = ~(((x <= lo) & (grad > 0)) | ((x >= hi) & (grad < 0)))
        if not free.any():
            break
        step = np.zeros_like(x)
        step[free] = -np.linalg.solve(H[np.ix_(free, free)], grad[free])
        if np.max(np.abs(step)) <= 1e-13 * (1.0 + np.max(np.abs(x))):
            break
        alpha = 1.0
        while alpha > 1e-10:
            xn = np.clip(x + alpha * step, lo, hi)
            vn = 0.5 * xn @ H @ xn + g @ xn
            if vn <= val:
                break
            alpha *= 0.5
        else:
            break
        x, val = xn, vn
    grad = H @ x + g
    free = ~(((x <= lo) & (grad > 0)) | ((x >= hi) & (grad < 0)))
    return x, free


def _kkt(Ad, Bd, lx, lu, U, lo, hi) -> float:
    """Infinity norm of the projected single-shooting cost gradient (unscaled cost)."""
    lam = lx[-1]
    worst = 0.0
    for i in range(len(U) - 1, -1, -1):
        g = 2.0 * (lu[i] + Bd[i].T @ lam)
        g = np.where((U[i] <= lo) & (g > 0), 0.0, g)
        g = np.where((U[i] >= hi) & (g < 0), 0.0, g)
        worst = max(worst, float(np.max(np.abs(g))))
        lam = lx[i] + Ad[i].T @ lam
    return worst


def _backward(Ad, Bd, lx, lxx, lu, R, U, lo, hi):
    N = len(U)
    k = np.zeros((N, NU))
    K = np.zeros((N, NU, NX))
    Vx = lx[-1].copy()
    Vxx = np.diag(lxx[-1])
    dv1 = dv2 = 0.0
    Rm = np.diag(R)
    for i in range(N - 1, -1, -1):
        A, B = Ad[i], Bd[i]
        VB = Vxx @ B
        Qx = lx[i] + A.T @ Vx
        Qu = lu[i] + B.T @ Vx
        Qxx = np.diag(lxx[i]) + A.T @ Vxx @ A
        Quu = Rm + B.T @ VB
        Qux = VB.T @ A
        Quu = 0.5 * (Quu + Quu.T)
        ki, free = _box_qp(Quu, Qu, lo - U[i], hi - U[i])
        Ki = np.zeros((NU, NX))
        if free.any():
            Ki[free] = -np.linalg.solve(Quu[np.ix_(free, free)], Qux[free])
        k[i], K[i] = ki, Ki
        dv1 += ki @ Qu
        dv2 += 0.5 * ki @ Quu @ ki
        Vx = Qx + Ki.T @ Quu @ ki + Ki.T @ Qu + Qux.T @ ki
        Vxx = Qxx + Ki.T @ Quu @ Ki + Ki.T @ Qux + Qux.T @ Ki
        Vxx = 0.5 * (Vxx + Vxx.T)
    return k, K, dv1, dv2


def mpc_solve(model: DynamicsModel, x0, ref, cfg: MpcConfig = MpcConfig(), warm_start=None,
              u_ref=None, params: QuadParams | None = None, shift: bool = True) -> MpcSolution:
    """Approximately minimize the tracking cost over the horizon from ``x0``.

    ``ref`` is an ``(N+1, 12)`` array of desired states.  ``warm_start`` is a
    previous :class:`MpcSolution` (shifted by one step when ``shift``) or an
    ``(N, 4)`` input guess.  Returns the lowest-cost iterate found.
    """
    p = params if params is not None else getattr(model, "params", QuadParams())
    lo, hi = cfg.bounds(p)
    xlo, xhi = cfg.state_bounds()
    N, h = cfg.N, cfg.dt_c
    x0 = np.asarray(x0, dtype=float)
    x_ref = np.asarray(ref, dtype=float)
    if x_ref.shape != (N + 1, NX):
        raise ValueError(f"reference must have shape ({N + 1}, {NX})")
    u_hover = p.hover_input if u_ref is None else np.asarray(u_ref, dtype=float)
    prob = _Problem(x_ref, u_hover, cfg, xlo, xhi)

    if warm_start is None:
        U = np.tile(u_hover, (N, 1))
    else:
        U0 = warm_start.u_seq if isinstance(warm_start, MpcSolution) else np.asarray(warm_start, dtype=float)
        if shift and isinstance(warm_start, MpcSolution):
            U0 = np.vstack([U0[1:], U0[-1:]])
        if U0.shape != (N, NU):
            raise ValueError("warm start has the wrong shape")
        U = U0.copy()
    U = np.clip(U, lo, hi)

    f = model.derivative
    X = _rollout(f, x0, U, h)
    J = prob.cost(X, U)
    if not np.isfinite(J):
        raise NumericalError("non-finite MPC rollout")
    history = [J]
    kkt, converged, iters = np.inf, False, 0
    for _ in range(cfg.sqp_iters):
        iters += 1
        Ad, Bd = rk4_jacobians(model, X[:-1], U, h)
        lx, lxx, lu = prob.derivatives(X, U)
        kkt = _kkt(Ad, Bd, lx, lu, U, lo, hi)
        if kkt < cfg.kkt_tol:
            converged = True
            break
        k, K, dv1, dv2 = _backward(Ad, Bd, lx, lxx, lu, prob.R, U, lo, hi)
        accepted = False
        alpha = 1.0
        for _ in range(cfg.max_backtracks):
            expected = -2.0 * (alpha * dv1 + alpha**2 * dv2)  # unscaled cost
            Xn = np.empty_like(X)
            Xn[0] = x0
            Un = np.empty_like(U)
            try:
                for i in range(N):
                    Un[i] = np.clip(U[i] + alpha * k[i] + K[i] @ state_difference(Xn[i], X[i]), lo, hi)
                    Xn[i + 1] = rk4_step(f, Xn[i], Un[i], h)
                Jn = prob.cost(Xn, Un)
            except (NumericalError, ValueError):
                Jn = np.inf
            if np.isfinite(Jn) and J - Jn >= ARMIJO * max(expected, 0.0) and Jn <= J:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        X, U, J = Xn, Un, Jn
        history.append(J)
    return MpcSolution(U, X, J, kkt, iters, converged, tuple(history))


@dataclass
class ClosedLoopLog:
    cost: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    kkt_residual: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    solve_seconds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        """Deterministic content only; solver wall times are kept separately."""
        return {"cost": self.cost, "iterations": self.iterations,
                "kkt_residual": self.kkt_residual, "converged": self.converged}


def closed_loop_simulate(controller: DynamicsModel, plant, ref: Reference, duration: float,
                         cfg: MpcConfig = MpcConfig(), x0=None, plant_dt: float = 2e-3,
                         params: QuadParams | None = None, bound: float = 1e4):
    """Fly ``plant`` under receding-horizon MPC built on ``controller``.

    The plant is integrated with adaptive RK45 and sampled every ``plant_dt``;
    a new input is computed from the measured state every ``cfg.dt_c`` and
    held in between.  Returns the recorded trajectory and a per-solve log.
    """
    ratio = cfg.dt_c / plant_dt
    n_ctrl = duration / cfg.dt_c
    if abs(ratio - round(ratio)) > 1e-9 or abs(n_ctrl - round(n_ctrl)) > 1e-9 or duration <= 0:
        raise ValueError("duration and dt_c must be positive multiples of plant_dt")
    ratio, n_ctrl = int(round(ratio)), int(round(n_ctrl))
    x = np.array(ref.states[0] if x0 is None else x0, dtype=float)
    t0 = float(ref.times[0])
    log = ClosedLoopLog()
    n = n_ctrl * ratio
    states = np.empty((n + 1, NX))
    inputs = np.empty((n + 1, NU))
    states[0] = x
    sol, h = None, None
    f = plant.derivative if hasattr(plant, "derivative") else plant
    for k in range(n_ctrl):
        t = t0 + k * cfg.dt_c
        tic = time.perf_counter()
        sol = mpc_solve(controller, x, ref.window(t, cfg.N, cfg.dt_c), cfg, warm_start=sol, params=params)
        log.solve_seconds.append(time.perf_counter() - tic)
        log.cost.append(sol.cost)
        log.iterations.append(sol.iterations)
        log.kkt_residual.append(sol.kkt_residual)
        log.converged.append(sol.converged)
        u = sol.u_seq[0]
        for j in range(ratio):
            i = k * ratio + j
            inputs[i] = u
            x, h = dopri_interval(f, x, u, plant_dt, h0=h)
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
                raise NumericalError(f"closed loop diverged at t={t0 + (i + 1) * plant_dt:.3f}s")
            states[i + 1] = x
    inputs[-1] = inputs[-2]
    times = t0 + plant_dt * np.arange(n + 1)
    return Trajectory(times, states, inputs), log

