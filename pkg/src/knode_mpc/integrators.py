"""Explicit Runge-Kutta integrators with zero-order-hold inputs."""

from __future__ import annotations

import numpy as np

from .dynamics import NumericalError
from .trajectory import Trajectory

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def rk4_step(f, x, u, h):
    """One classical RK4 step of ``xdot = f(x, u)`` with ``u`` held constant.

    ``h`` may be a scalar or broadcast against the leading batch dimensions.
    """
    if isinstance(h, (float, int)):
        if not h > 0:
            raise ValueError("step size must be positive")
    else:
        h = np.asarray(h, dtype=float)
        if np.any(h <= 0):
            raise ValueError("step size must be positive")
        if h.ndim:
            h = h[..., None]
    k1 = f(x, u)
    k2 = f(x + 0.5 * h * k1, u)
    k3 = f(x + 0.5 * h * k2, u)
    k4 = f(x + h * k3, u)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(out.sum()):  # cheaper than an elementwise check
        raise NumericalError("RK4 step produced non-finite state")
    return out


def dopri_interval(f, x, u, dt, rtol=1e-10, atol=1e-12, h0=None, max_substeps=10_000):
    """Advance ``x`` by exactly ``dt`` with error-controlled Dormand-Prince substeps.

    Returns ``(x_end, h_suggested)`` so consecutive intervals can reuse the step size.
    """
    x = np.asarray(x, dtype=float)
    t, h = 0.0, dt if h0 is None else min(h0, dt)
    k1 = f(x, u)
    for _ in range(max_substeps):
        if t >= dt * (1 - 1e-12):
            return x, h
        h = min(h, dt - t)
        k = [k1]
        for i in range(1, 7):
            xi = x + h * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
            k.append(f(xi, u))
        x_new = xi  # stage 7 sits at the 5th-order solution (FSAL)
        err = h * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if not np.isfinite(err_norm):
            raise NumericalError("non-finite error estimate in RK45 substep")
        if err_norm <= 1.0:
            t += h
            x, k1 = x_new, k[6]
            fac = 5.0 if err_norm == 0 else min(5.0, 0.9 * err_norm ** -0.2)
        else:
            fac = max(0.2, 0.9 * err_norm ** -0.2)
        h = h * fac
    raise NumericalError("RK45 exceeded the substep limit")


def rk45_simulate(f, x0, inputs=None, t_span=1.0, dt=2e-3, rtol=1e-10, atol=1e-12,
                  bound=1e6, t0=0.0) -> Trajectory:
    """Integrate ``xdot = f(x, u)`` and sample the solution every ``dt`` seconds.

    ``inputs`` is either ``None`` (no input), a single input vector, an array
    with one row per interval, or a callable ``inputs(t, x)`` evaluated at each
    sample.  Inputs are held constant over each interval; the recorded input
    at the final sample repeats the last applied one.
    """
    n = int(round(t_span / dt))
    if t_span <= 0 or n < 1 or abs(n * dt - t_span) > 1e-9:
        raise ValueError("t_span must be a positive multiple of dt")
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((n + 1,) + x.shape)
    states[0] = x
    us = []
    h = None
    for i in range(n):
        t = t0 + i * dt
        if inputs is None:
            u = np.zeros(0)
        elif callable(inputs):
            u = np.asarray(inputs(t, x), dtype=float)
        else:
            arr = np.asarray(inputs, dtype=float)
            u = arr if arr.ndim == 1 else arr[i]
        us.append(u)
        x, h = dopri_interval(f, x, u, dt, rtol=rtol, atol=atol, h0=h)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
            raise NumericalError(f"state diverged at t={t + dt:.3f}s")
        states[i + 1] = x
    us.append(us[-1])
    times = t0 + dt * np.arange(n + 1)
    return Trajectory(times, states, np.array(us))
