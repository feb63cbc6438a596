"""Reference trajectories, dynamic time warping and the comparison experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .control import MpcConfig, Reference, closed_loop_simulate
from .dynamics import NX
from .integrators import rk45_simulate, rk4_step
from .trajectory import Trajectory


# ---------------------------------------------------------------------------
# references
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefSpec:
    kind: str = "circle"
    radius: float = 2.0
    period: float = 10.0
    altitude: float = 1.0
    center: tuple = (0.0, 0.0)
    yaw_mode: str = "fixed-zero"
    ramp: float = 2.0  # seconds of minimum-jerk speed-up from hover
    direction: int = 1  # +1 counter-clockwise, -1 clockwise (seen from above)

    def __post_init__(self):
        if self.kind not in ("circle", "lemniscate"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if not self.radius > 0 or not self.period > 0:
            raise ValueError("radius and period must be positive")
        if self.ramp < 0:
            raise ValueError("ramp must be nonnegative")
        if self.yaw_mode != "fixed-zero":
            raise ValueError("only yaw_mode 'fixed-zero' is supported")
        if len(self.center) != 2:
            raise ValueError("center must be a 2-vector")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")

    @property
    def name(self) -> str:
        r = f"{self.radius:g}".replace(".", "p")
        return f"{self.kind}-r{r}" + ("-cw" if self.direction < 0 else "")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "radius": self.radius, "period": self.period,
                "altitude": self.altitude, "center": list(self.center),
                "yaw_mode": self.yaw_mode, "ramp": self.ramp, "direction": self.direction}


def _time_warp(t, ramp):
    """Phase time ``s(t)`` and its first two derivatives.

    During the ramp the phase speed follows the minimum-jerk blend
    10 tau^3 - 15 tau^4 + 6 tau^5 from 0 to 1; afterwards it is 1.
    """
    t = np.asarray(t, dtype=float)
    if ramp == 0:
        return t, np.ones_like(t), np.zeros_like(t)
    tau = np.clip(t / ramp, 0.0, 1.0)
    inside = t < ramp
    s = np.where(inside, ramp * (2.5 * tau**4 - 3 * tau**5 + tau**6), t - 0.5 * ramp)
    ds = np.where(inside, 10 * tau**3 - 15 * tau**4 + 6 * tau**5, 1.0)
    dds = np.where(inside, (30 * tau**2 - 60 * tau**3 + 30 * tau**4) / ramp, 0.0)
    return s, ds, dds


def _curve(spec: RefSpec, s):
    """Planar curve and its phase derivative at phase time ``s``."""
    w = spec.direction * 2 * math.pi / spec.period
    R = spec.radius
    c, sn = np.cos(w * s), np.sin(w * s)
    if spec.kind == "circle":
        return np.stack([R * c, R * sn], -1), np.stack([-R * w * sn, R * w * c], -1)
    pos = np.stack([R * c, R * sn * c], -1)
    vel = np.stack([-R * w * sn, R * w * (c * c - sn * sn)], -1)
    return pos, vel


def gen_reference(spec: RefSpec, duration: float, dt: float) -> Reference:
    """Sample the reference every ``dt`` over ``[0, duration]`` (inclusive)."""
    n = duration / dt
    if not duration > 0 or not dt > 0 or abs(n - round(n)) > 1e-9:
        raise ValueError("duration must be a positive multiple of dt")
    t = dt * np.arange(int(round(n)) + 1)
    s, ds, _ = _time_warp(t, spec.ramp)
    pos, vel = _curve(spec, s)
    X = np.zeros((len(t), NX))
    X[:, 0:2] = pos + np.asarray(spec.center, dtype=float)
    X[:, 2] = spec.altitude
    X[:, 3:5] = vel * ds[:, None]
    return Reference(t, X)


# ---------------------------------------------------------------------------
# dynamic time warping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DtwResult:
    distance: float
    path: tuple

    @property
    def normalized(self) -> float:
        return self.distance / len(self.path)


def _as_sequence(A):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2 or len(A) == 0:
        raise ValueError("DTW needs a nonempty sequence of vectors")
    return A


def _local_costs(A, B, chunk=256):
    return np.concatenate([np.linalg.norm(A[k:k + chunk, None, :] - B[None, :, :], axis=-1)
                           for k in range(0, len(A), chunk)])


def dtw_distance(A, B, with_path: bool = True) -> DtwResult:
    """Classical DTW with Euclidean local cost and no window.

    The accumulated-cost table is filled one anti-diagonal at a time.
    """
    A, B = _as_sequence(A), _as_sequence(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError("sequences must have the same dimension")
    n, m = len(A), len(B)
    C = _local_costs(A, B)
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for d in range(2, n + m + 1):
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        j = d - i
        best = np.minimum(np.minimum(D[i - 1, j - 1], D[i - 1, j]), D[i, j - 1])
        D[i, j] = C[i - 1, j - 1] + best
    path = ()
    if with_path:
        i, j, steps = n, m, [(n - 1, m - 1)]
        while (i, j) != (1, 1):
            cands = ((D[i - 1, j - 1], i - 1, j - 1), (D[i - 1, j], i - 1, j), (D[i, j - 1], i, j - 1))
            _, i, j = min(cands, key=lambda c: c[0])
            steps.append((i - 1, j - 1))
        path = tuple(reversed(steps))
    return DtwResult(float(D[n, m]), path)


def dtw_brute_force(A, B) -> float:
    """Minimum path cost over every monotone alignment path (tiny inputs only)."""
    A, B = _as_sequence(A), _as_sequence(B)
    n, m = len(A), len(B)
    C = _local_costs(A, B)
    best = math.inf
    moves = ((1, 0), (0, 1), (1, 1))

    def walk(i, j, acc):
        nonlocal best
        acc = acc + C[i, j]
        if (i, j) == (n - 1, m - 1):
            best = min(best, acc)
            return
        for di, dj in moves:
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ("spec", "model", "dtw_raw", "dtw_normalized", "rmse")


@dataclass(frozen=True)
class ExperimentResult:
    rows: list  # dicts keyed by TABLE_COLUMNS
    trajectories: dict  # (spec name, model name) -> Trajectory
    extra_rows: list = ()  # secondary table (one-step errors)
    logs: dict = None  # (spec name, model name) -> ClosedLoopLog


def position_errors(pred, truth, stride: int = 10) -> dict:
    """DTW (raw and normalized) on positions subsampled by ``stride``, and full-rate RMSE."""
    d = dtw_distance(pred[::stride], truth[::stride])
    rmse = float(np.sqrt(np.mean(np.sum((pred - truth) ** 2, axis=1))))
    return {"dtw_raw": d.distance, "dtw_normalized": d.normalized, "rmse": rmse}


def _failed() -> dict:
    return {"dtw_raw": math.inf, "dtw_normalized": math.inf, "rmse": math.inf}


def fly_reference(controller, plant, spec: RefSpec, duration: float, cfg: MpcConfig,
                  plant_dt: float = 2e-3, params=None):
    """Closed-loop flight of ``spec`` starting at hover on the reference start point."""
    ref = gen_reference(spec, duration + cfg.N * cfg.dt_c, cfg.dt_c)
    return closed_loop_simulate(controller, plant, ref, duration, cfg, plant_dt=plant_dt, params=params)


def prediction_experiment(models: dict, plant, specs, duration: float = 8.0,
                          cfg: MpcConfig = MpcConfig(), pilot=None, stride: int = 10,
                          plant_dt: float = 2e-3) -> ExperimentResult:
    """Open-loop prediction accuracy of each model against closed-loop plant data.

    For every spec the plant is flown by MPC built on ``pilot`` (normally the
    nominal model); each model then re-simulates the whole flight from the
    recorded initial state under the recorded inputs.  A prediction that
    diverges is scored as infinite error.  The secondary table holds the
    mean one-step RK4 position/velocity error over the same flight.
    """
    pilot = pilot if pilot is not None else models["nominal"]
    rows, extra, trajs = [], [], {}
    for spec in specs:
        truth, _ = fly_reference(pilot, plant, spec, duration, cfg, plant_dt)
        trajs[(spec.name, "truth")] = truth
        for name, model in models.items():
            try:
                sim = rk45_simulate(model, truth.states[0], truth.inputs[:-1], duration, dt=plant_dt,
                                    bound=1e4)
                err = position_errors(sim.positions, truth.positions, stride)
                trajs[(spec.name, name)] = sim
            except (ArithmeticError, ValueError):
                err = _failed()
            rows.append({"spec": spec.name, "model": name, **err})
            step = rk4_step(model.derivative, truth.states[:-1], truth.inputs[:-1], plant_dt)
            e = step - truth.states[1:]
            extra.append({"spec": spec.name, "model": name,
                          "one_step_pos_rmse": float(np.sqrt(np.mean(np.sum(e[:, :3] ** 2, 1)))),
                          "one_step_vel_rmse": float(np.sqrt(np.mean(np.sum(e[:, 3:6] ** 2, 1))))})
    return ExperimentResult(rows, trajs, extra)


def tracking_experiment(controllers: dict, plant, specs, duration: float = 8.0,
                        cfg: MpcConfig = MpcConfig(), stride: int = 10,
                        plant_dt: float = 2e-3) -> ExperimentResult:
    """Closed-loop tracking error of MPC built on each controller model."""
    rows, trajs, logs = [], {}, {}
    for spec in specs:
        planned = gen_reference(spec, duration, plant_dt)
        trajs[(spec.name, "reference")] = Trajectory(planned.times, planned.states,
                                                     np.zeros((len(planned), 4)))
        for name, model in controllers.items():
            try:
                tr, log = fly_reference(model, plant, spec, duration, cfg, plant_dt)
                err = position_errors(tr.positions, planned.positions, stride)
                trajs[(spec.name, name)] = tr
                logs[(spec.name, name)] = log
            except (ArithmeticError, ValueError):
                err = _failed()
            rows.append({"spec": spec.name, "model": name, **err})
    return ExperimentResult(rows, trajs, logs=logs)


def summarize(rows, baseline: str, candidate: str) -> dict:
    """Per-spec and mean relative reduction ``1 - candidate / baseline`` in raw DTW."""
    by = {(r["spec"], r["model"]): r["dtw_raw"] for r in rows}
    specs = sorted({r["spec"] for r in rows}, key=[r["spec"] for r in rows].index)
    red = {s: 1.0 - by[(s, candidate)] / by[(s, baseline)] for s in specs}
    return {"per_spec": red, "mean": float(np.mean(list(red.values())))}


def write_table(rows, path, columns=TABLE_COLUMNS) -> None:
    """CSV with fixed column order and 17-significant-digit floats."""
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.17g}" if isinstance(r[c], float) else str(r[c]) for c in columns))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_table(path) -> list:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        out = []
        for line in fh:
            vals = line.strip().split(",")
            out.append({k: (v if k in ("spec", "model") else float(v)) for k, v in zip(header, vals)})
    return out
