"""First-principles quadrotor model and the synthetic drag plant.

States are plain ``float64`` arrays laid out as::

    x = [r (3), v (3), eul = (roll, pitch, yaw) (3), omega = (p, q, r) (3)]

and inputs as ``u = [u1, u2x, u2y, u2z]`` (collective thrust, body moments).
Every function accepts arbitrary leading batch dimensions, so a stack of
``(B, 12)`` states can be pushed through in one call.

Attitude uses the Z-X-Y Euler sequence, ``R = Rz(yaw) @ Rx(roll) @ Ry(pitch)``.
For that sequence the body-rate map is singular where ``cos(roll) = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NX = 12
NU = 4
POS = slice(0, 3)
VEL = slice(3, 6)
EUL = slice(6, 9)
OMEGA = slice(9, 12)

GIMBAL_EPS = 0.02


class KnodeMpcError(Exception):
    """Base class for errors raised by this package."""


class GimbalLockError(KnodeMpcError, ValueError):
    pass


class NumericalError(KnodeMpcError, ArithmeticError):
    """Non-finite values or divergence during integration or optimization."""


@dataclass(frozen=True)
class QuadParams:
    m: float = 0.5
    J: tuple[float, float, float] = (2.3e-3, 2.3e-3, 4.0e-3)
    L: float = 0.17
    gamma: float = 0.016
    g: float = 9.81

    def __post_init__(self):
        object.__setattr__(self, "J", tuple(float(j) for j in self.J))
        if len(self.J) != 3:
            raise ValueError("J must hold three principal moments")
        for name in ("m", "L", "gamma", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not all(j > 0 for j in self.J):
            raise ValueError("inertia entries must be positive")

    @property
    def hover_input(self) -> np.ndarray:
        return np.array([self.m * self.g, 0.0, 0.0, 0.0])

    def to_dict(self) -> dict:
        return {"m": self.m, "J": list(self.J), "L": self.L, "gamma": self.gamma, "g": self.g}


@dataclass(frozen=True)
class DragParams:
    """Mass-normalized body-frame drag: coefficients in 1/s and 1/m."""

    d_lin: tuple[float, float, float] = (0.3, 0.3, 0.15)
    d_quad: tuple[float, float, float] = (0.1, 0.1, 0.05)

    def __post_init__(self):
        for name in ("d_lin", "d_quad"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 3 or any(v < 0 for v in vals):
                raise ValueError(f"{name} must be three nonnegative coefficients")
            object.__setattr__(self, name, vals)

    @classmethod
    def zero(cls) -> "DragParams":
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    def to_dict(self) -> dict:
        return {"d_lin": list(self.d_lin), "d_quad": list(self.d_quad)}


def hover_state(position=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(NX)
    x[POS] = position
    return x


def _check_gimbal(roll):
    if np.any(np.abs(np.cos(roll)) < np.sin(GIMBAL_EPS)):
        raise GimbalLockError("roll angle within gimbal-lock margin of +-pi/2")


def euler_to_rotation(eul) -> np.ndarray:
    """Body-to-world rotation for Z-X-Y Euler angles ``(roll, pitch, yaw)``."""
    eul = np.asarray(eul, dtype=float)
    phi, theta, psi = eul[..., 0], eul[..., 1], eul[..., 2]
    _check_gimbal(phi)
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    R = np.empty(eul.shape[:-1] + (3, 3))
    R[..., 0, 0] = cpsi * cth - sphi * spsi * sth
    R[..., 0, 1] = -cphi * spsi
    R[..., 0, 2] = cpsi * sth + cth * sphi * spsi
    R[..., 1, 0] = cth * spsi + cpsi * sphi * sth
    R[..., 1, 1] = cphi * cpsi
    R[..., 1, 2] = spsi * sth - cpsi * cth * sphi
    R[..., 2, 0] = -cphi * sth
    R[..., 2, 1] = sphi
    R[..., 2, 2] = cphi * cth
    return R


def euler_rate_matrix(eul) -> np.ndarray:
    """Matrix mapping Euler-angle rates to body rates, ``omega = W @ eul_dot``."""
    eul = np.asarray(eul, dtype=float)
    phi, theta = eul[..., 0], eul[..., 1]
    W = np.zeros(eul.shape[:-1] + (3, 3))
    W[..., 0, 0] = np.cos(theta)
    W[..., 0, 2] = -np.cos(phi) * np.sin(theta)
    W[..., 1, 1] = 1.0
    W[..., 1, 2] = np.sin(phi)
    W[..., 2, 0] = np.sin(theta)
    W[..., 2, 2] = np.cos(phi) * np.cos(theta)
    return W


def mixing_matrix(p: QuadParams) -> np.ndarray:
    L, gm = p.L, p.gamma
    return np.array([
        [0.0, L, 0.0, -L],
        [-L, 0.0, L, 0.0],
        [gm, -gm, gm, -gm],
    ])


def motor_forces_to_input(F, p: QuadParams) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if np.any(F < 0):
        raise ValueError("motor forces must be nonnegative")
    u = np.empty(F.shape[:-1] + (NU,))
    u[..., 0] = F.sum(axis=-1)
    u[..., 1:] = F @ mixing_matrix(p).T
    return u


def nominal_derivative(x, u, p: QuadParams) -> np.ndarray:
    """Rigid-body quadrotor dynamics without any aerodynamic terms."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim == 1 and u.ndim == 1:
        return np.array(_nominal_single(x.tolist(), u.tolist(), p))
    phi, theta, psi = x[..., 6], x[..., 7], x[..., 8]
    wp, wq, wr = x[..., 9], x[..., 10], x[..., 11]
    _check_gimbal(phi)
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    Jx, Jy, Jz = p.J
    a = u[..., 0] / p.m

    shape = np.broadcast_shapes(x.shape, u.shape[:-1] + (NX,))
    dx = np.empty(shape)
    dx[..., 0:3] = x[..., 3:6]
    dx[..., 3] = a * (cpsi * sth + cth * sphi * spsi)
    dx[..., 4] = a * (spsi * sth - cpsi * cth * sphi)
    dx[..., 5] = a * (cphi * cth) - p.g
    dx[..., 6] = cth * wp + sth * wr
    dx[..., 7] = wq + (sphi / cphi) * (sth * wp - cth * wr)
    dx[..., 8] = (cth * wr - sth * wp) / cphi
    dx[..., 9] = (u[..., 1] - (Jz - Jy) * wq * wr) / Jx
    dx[..., 10] = (u[..., 2] - (Jx - Jz) * wr * wp) / Jy
    dx[..., 11] = (u[..., 3] - (Jy - Jx) * wp * wq) / Jz
    return dx


def _nominal_single(x, u, p: QuadParams) -> list:
    # scalar path for unbatched calls; same expressions as the array path
    phi, theta, psi, wp, wq, wr = x[6], x[7], x[8], x[9], x[10], x[11]
    cphi, sphi = math.cos(phi), math.sin(phi)
    if abs(cphi) < math.sin(GIMBAL_EPS):
        raise GimbalLockError("roll angle within gimbal-lock margin of +-pi/2")
    cth, sth = math.cos(theta), math.sin(theta)
    cpsi, spsi = math.cos(psi), math.sin(psi)
    Jx, Jy, Jz = p.J
    a = u[0] / p.m
    return [
        x[3], x[4], x[5],
        a * (cpsi * sth + cth * sphi * spsi),
        a * (spsi * sth - cpsi * cth * sphi),
        a * (cphi * cth) - p.g,
        cth * wp + sth * wr,
        wq + (sphi / cphi) * (sth * wp - cth * wr),
        (cth * wr - sth * wp) / cphi,
        (u[1] - (Jz - Jy) * wq * wr) / Jx,
        (u[2] - (Jx - Jz) * wr * wp) / Jy,
        (u[3] - (Jy - Jx) * wp * wq) / Jz,
    ]


def nominal_jacobians(x, u, p: QuadParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(df/dx, df/du)`` of :func:`nominal_derivative`."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    phi, theta, psi = x[..., 6], x[..., 7], x[..., 8]
    wp, wq, wr = x[..., 9], x[..., 10], x[..., 11]
    _check_gimbal(phi)
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    tphi = sphi / cphi
    Jx, Jy, Jz = p.J
    a = u[..., 0] / p.m

    A = np.zeros(batch + (NX, NX))
    B = np.zeros(batch + (NX, NU))
    A[..., 0, 3] = A[..., 1, 4] = A[..., 2, 5] = 1.0

    # thrust direction (third column of R) and its Euler partials
    A[..., 3, 6] = a * cth * cphi * spsi
    A[..., 4, 6] = -a * cpsi * cth * cphi
    A[..., 5, 6] = -a * sphi * cth
    A[..., 3, 7] = a * (cpsi * cth - sth * sphi * spsi)
    A[..., 4, 7] = a * (spsi * cth + cpsi * sth * sphi)
    A[..., 5, 7] = -a * cphi * sth
    A[..., 3, 8] = a * (-spsi * sth + cth * sphi * cpsi)
    A[..., 4, 8] = a * (cpsi * sth + spsi * cth * sphi)
    B[..., 3, 0] = (cpsi * sth + cth * sphi * spsi) / p.m
    B[..., 4, 0] = (spsi * sth - cpsi * cth * sphi) / p.m
    B[..., 5, 0] = cphi * cth / p.m

    # Euler-rate kinematics
    A[..., 7, 6] = (sth * wp - cth * wr) / cphi**2
    A[..., 8, 6] = (cth * wr - sth * wp) * sphi / cphi**2
    A[..., 6, 7] = -sth * wp + cth * wr
    A[..., 7, 7] = tphi * (cth * wp + sth * wr)
    A[..., 8, 7] = -(sth * wr + cth * wp) / cphi
    A[..., 6, 9] = cth
    A[..., 7, 9] = tphi * sth
    A[..., 8, 9] = -sth / cphi
    A[..., 7, 10] = 1.0
    A[..., 6, 11] = sth
    A[..., 7, 11] = -tphi * cth
    A[..., 8, 11] = cth / cphi

    # gyroscopic coupling
    A[..., 9, 10] = -(Jz - Jy) * wr / Jx
    A[..., 9, 11] = -(Jz - Jy) * wq / Jx
    A[..., 10, 9] = -(Jx - Jz) * wr / Jy
    A[..., 10, 11] = -(Jx - Jz) * wp / Jy
    A[..., 11, 9] = -(Jy - Jx) * wq / Jz
    A[..., 11, 10] = -(Jy - Jx) * wp / Jz
    B[..., 9, 1] = 1.0 / Jx
    B[..., 10, 2] = 1.0 / Jy
    B[..., 11, 3] = 1.0 / Jz
    return A, B


def drag_acceleration(x, d: DragParams) -> np.ndarray:
    """Linear plus quadratic drag, evaluated in the body frame and rotated back."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.array(_drag_single(x.tolist(), d))
    R = euler_to_rotation(x[..., EUL])
    v = x[..., VEL]
    vb = np.einsum("...ji,...j->...i", R, v)
    fb = np.asarray(d.d_lin) * vb + np.asarray(d.d_quad) * vb * np.abs(vb)
    return -np.einsum("...ij,...j->...i", R, fb)


def _drag_single(x, d: DragParams) -> list:
    phi, theta, psi = x[6], x[7], x[8]
    cphi, sphi = math.cos(phi), math.sin(phi)
    if abs(cphi) < math.sin(GIMBAL_EPS):
        raise GimbalLockError("roll angle within gimbal-lock margin of +-pi/2")
    cth, sth = math.cos(theta), math.sin(theta)
    cpsi, spsi = math.cos(psi), math.sin(psi)
    R = (
        (cpsi * cth - sphi * spsi * sth, -cphi * spsi, cpsi * sth + cth * sphi * spsi),
        (cth * spsi + cpsi * sphi * sth, cphi * cpsi, spsi * sth - cpsi * cth * sphi),
        (-cphi * sth, sphi, cphi * cth),
    )
    v = x[3:6]
    fb = []
    for j in range(3):
        vb = R[0][j] * v[0] + R[1][j] * v[1] + R[2][j] * v[2]
        fb.append(d.d_lin[j] * vb + d.d_quad[j] * vb * abs(vb))
    return [-(R[i][0] * fb[0] + R[i][1] * fb[1] + R[i][2] * fb[2]) for i in range(3)]


def true_derivative(x, u, p: QuadParams, d: DragParams) -> np.ndarray:
    dx = nominal_derivative(x, u, p)
    dx[..., VEL] += drag_acceleration(x, d)
    return dx


def wrap_angle(a):
    """Map angles onto (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)


def state_difference(a, b) -> np.ndarray:
    """``a - b`` with the Euler entries wrapped onto (-pi, pi]."""
    e = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    e[..., EUL] = wrap_angle(e[..., EUL])
    return e


def finite_difference_jacobians(f, x, u, eps: float = 1e-6):
    """Central-difference ``(df/dx, df/du)`` for a batched derivative ``f(x, u)``.

    All ``2 * (nx + nu)`` perturbations are evaluated in a single batched call.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, batch + x.shape[-1:])
    u = np.broadcast_to(u, batch + u.shape[-1:])
    nx, nu = x.shape[-1], u.shape[-1]
    n = nx + nu
    E = np.eye(n) * eps
    pert = np.concatenate([E, -E])  # (2n, n)
    xs = x[..., None, :] + pert[:, :nx]
    us = u[..., None, :] + pert[:, nx:]
    fs = f(xs, us)  # batch + (2n, nx_out)
    D = (fs[..., :n, :] - fs[..., n:, :]) / (2.0 * eps)
    J = np.swapaxes(D, -1, -2)
    return J[..., :nx], J[..., nx:]


class DynamicsModel:
    """Continuous-time model ``xdot = f(x, u)`` with Jacobians for linearization.

    Subclasses implement :meth:`derivative`; the default :meth:`jacobians`
    falls back to central finite differences.
    """

    def derivative(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, u) -> np.ndarray:
        return self.derivative(x, u)

    def jacobians(self, x, u):
        return finite_difference_jacobians(self.derivative, x, u)


@dataclass(frozen=True)
class NominalModel(DynamicsModel):
    params: QuadParams = field(default_factory=QuadParams)

    def derivative(self, x, u):
        return nominal_derivative(x, u, self.params)

    def jacobians(self, x, u):
        return nominal_jacobians(x, u, self.params)


@dataclass(frozen=True)
class DragPlant(DynamicsModel):
    """Nominal dynamics plus body drag; stands in for the real vehicle."""

    params: QuadParams = field(default_factory=QuadParams)
    drag: DragParams = field(default_factory=DragParams)

    def derivative(self, x, u):
        return true_derivative(x, u, self.params, self.drag)
