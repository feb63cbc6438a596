"""KNODE training: one-step RK4 predictions, MSE loss and its exact gradient.

The gradient is the discrete adjoint of the fixed-step RK4 map, i.e.
reverse-mode differentiation through the four stages, so it is exact for the
loss that is actually minimized.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    NX,
    GimbalLockError,
    NumericalError,
    QuadParams,
    nominal_derivative,
    nominal_jacobians,
    state_difference,
)
from .integrators import rk4_step
from .models import DEFAULT_LAYERS, HybridModel, flatten_grads, init_mlp, mlp_backward, mlp_forward_cache
from .trajectory import Trajectory


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    learning_rate: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 0  # one-step segments per gradient step, 0 = full batch
    seed: int = 0
    loss_weights: tuple[float, ...] | None = None
    val_every: int = 10
    segment_stride: int = 4

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.loss_weights is not None and (
                len(self.loss_weights) != NX or any(w <= 0 for w in self.loss_weights)):
            raise ValueError("loss_weights must be 12 positive numbers")
        if self.val_every < 1 or self.segment_stride < 1 or self.batch < 0:
            raise ValueError("val_every and segment_stride must be >= 1, batch >= 0")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_epochs: list[int] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_val_loss: list[float] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    final_val_loss: float = float("nan")
    best_epoch: int = 0
    seconds: float = 0.0

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock time is reported separately."""
        return {
            "train_loss": self.train_loss,
            "val_epochs": self.val_epochs,
            "val_loss": self.val_loss,
            "best_val_loss": self.best_val_loss,
            "initial_val_loss": self.initial_val_loss,
            "final_val_loss": self.final_val_loss,
            "best_epoch": self.best_epoch,
        }


@dataclass(frozen=True)
class Segments:
    """Flattened one-step training pairs ``(x_i, u_i) -> x_{i+1}`` over step ``h``."""

    x0: np.ndarray
    u: np.ndarray
    x1: np.ndarray
    h: np.ndarray

    def __len__(self):
        return len(self.x0)

    def subset(self, idx) -> "Segments":
        return Segments(self.x0[idx], self.u[idx], self.x1[idx], self.h[idx])

    @classmethod
    def from_trajectories(cls, data, stride: int = 1) -> "Segments":
        if isinstance(data, Segments):
            return data
        if isinstance(data, Trajectory):
            data = [data]
        parts = []
        for tr in data:
            dt = tr.dt  # raises on non-uniform spacing
            idx = np.arange(0, len(tr) - 1, stride)
            parts.append((tr.states[idx], tr.inputs[idx], tr.states[idx + 1], np.full(len(idx), dt)))
        if not parts:
            raise ValueError("no trajectories given")
        return cls(*(np.concatenate(p) for p in zip(*parts)))


def one_step_predict(h: HybridModel, x, u, dt):
    return rk4_step(h.derivative, x, u, dt)


def _weights(weights):
    return np.ones(NX) if weights is None else np.asarray(weights, dtype=float)


def knode_loss(h: HybridModel, data, loss_weights=None) -> float:
    """Mean over segments and state dimensions of the weighted squared one-step error."""
    seg = Segments.from_trajectories(data)
    err = state_difference(rk4_step(h.derivative, seg.x0, seg.u, seg.h), seg.x1)
    return float(np.sum(_weights(loss_weights) * err**2) / err.size)


def _loss_and_grad(h: HybridModel, seg: Segments, loss_weights=None):
    net, mask, p = h.net, h.residual_mask.astype(float), h.params
    X, U = seg.x0, seg.u
    hh = seg.h[:, None]

    # forward, keeping stage points and network activations
    pts, ks, caches = [X], [], []
    for c in (0.5, 0.5, 1.0, None):
        hs = mlp_forward_cache(net, np.concatenate([pts[-1], U], axis=-1))
        caches.append(hs)
        ks.append(nominal_derivative(pts[-1], U, p) + mask * hs[-1])
        if c is not None:
            pts.append(X + c * hh * ks[-1])
    xhat = X + (hh / 6.0) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
    if not np.all(np.isfinite(xhat)):
        raise NumericalError("non-finite one-step prediction")

    w = _weights(loss_weights)
    err = state_difference(xhat, seg.x1)
    n = err.size
    loss = float(np.sum(w * err**2) / n)
    gbar = 2.0 * w * err / n

    # reverse through the stages
    kbar = [hh / 6.0 * gbar, hh / 3.0 * gbar, hh / 3.0 * gbar, hh / 6.0 * gbar]
    theta_bar = np.zeros(net.n_params)
    stage_coef = (None, 0.5, 0.5, 1.0)
    for j in (3, 2, 1, 0):
        up = kbar[j]
        grads, gz = mlp_backward(net, caches[j], up * mask)
        theta_bar += flatten_grads(grads)
        if j > 0:
            A, _ = nominal_jacobians(pts[j], U, p)
            xbar = np.einsum("sij,si->sj", A, up) + gz[:, :NX]
            kbar[j - 1] = kbar[j - 1] + stage_coef[j] * hh * xbar
    if not np.all(np.isfinite(theta_bar)):
        raise NumericalError("non-finite loss gradient")
    return loss, theta_bar


def knode_loss_gradients(h: HybridModel, data, loss_weights=None) -> np.ndarray:
    """Exact gradient of :func:`knode_loss` w.r.t. ``h.net.flat_params()``."""
    return _loss_and_grad(h, Segments.from_trajectories(data), loss_weights)[1]


# inputs sharing a physical unit share one scale: [r, v, eul, omega, u1, u2]
INPUT_GROUPS = ((0, 3), (3, 6), (6, 9), (9, 12), (12, 13), (13, 16))


def input_statistics(data) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and per-group std of ``[x u]`` over all samples.

    Each group of inputs with a common unit is scaled by the largest std in
    the group, so a nearly constant component (altitude, yaw, vertical speed)
    is not blown up when the vehicle leaves the training envelope.  A group
    with std below 1e-6 is left unscaled.
    """
    seg = Segments.from_trajectories(data)
    Z = np.concatenate([seg.x0, seg.u], axis=1)
    mean, std = Z.mean(0), Z.std(0)
    for a, b in INPUT_GROUPS:
        std[a:b] = std[a:b].max()
    std = np.where(std < 1e-6, 1.0, std)
    return mean, std


def make_hybrid(params: QuadParams, data, layer_sizes=DEFAULT_LAYERS, seed=0,
                residual_mask=None, input_mask=None) -> HybridModel:
    """Fresh hybrid model with input standardization fit to ``data``.

    The output layer is zero, so the model starts exactly at the nominal
    dynamics. ``input_mask`` selects which ``[x u]`` features the net sees.
    """
    mean, std = input_statistics(data)
    net = init_mlp(layer_sizes, seed=seed, in_mean=mean, in_std=std, in_mask=input_mask)
    if residual_mask is None:
        return HybridModel(params, net)
    return HybridModel(params, net, residual_mask)


def train_knode(h: HybridModel, data, val, cfg: TrainConfig = TrainConfig()):
    """Adam on the one-step loss; returns the validation-best model and a report."""
    t_start = time.perf_counter()
    seg = Segments.from_trajectories(data, cfg.segment_stride)
    val_seg = Segments.from_trajectories(val)
    rng = np.random.default_rng(cfg.seed)
    b1, b2 = cfg.betas
    theta = h.net.flat_params()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)

    def val_loss(th):
        return knode_loss(h.with_net(h.net.with_params(th)), val_seg, cfg.loss_weights)

    report = TrainReport()
    best_theta, best = theta.copy(), val_loss(theta)
    report.initial_val_loss = best
    report.val_epochs.append(0)
    report.val_loss.append(best)
    report.best_val_loss.append(best)

    for epoch in range(1, cfg.epochs + 1):
        batch = seg
        if 0 < cfg.batch < len(seg):
            batch = seg.subset(np.sort(rng.choice(len(seg), cfg.batch, replace=False)))
        model = h.with_net(h.net.with_params(theta))
        try:
            loss, g = _loss_and_grad(model, batch, cfg.loss_weights)
        except GimbalLockError as exc:
            raise NumericalError(f"training diverged at epoch {epoch}: {exc}") from exc
        if not np.isfinite(loss):
            raise NumericalError("training loss became non-finite; lower the learning rate")
        report.train_loss.append(loss)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**epoch)
        vhat = v / (1 - b2**epoch)
        theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            try:
                vl = val_loss(theta)
            except GimbalLockError as exc:
                raise NumericalError(f"validation diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(vl):
                raise NumericalError("validation loss became non-finite")
            report.val_epochs.append(epoch)
            report.val_loss.append(vl)
            if vl < best:
                best, best_theta, report.best_epoch = vl, theta.copy(), epoch
            report.best_val_loss.append(best)

    report.final_val_loss = best
    report.seconds = time.perf_counter() - t_start
    return h.with_net(h.net.with_params(best_theta)), report


def gp_training_set(params: QuadParams, data, n_points: int = 80):
    """``n_points`` residual samples taken at a uniform stride over ``data``.

    Inputs are ``[x u]``; targets are the derivative residual estimated from
    consecutive samples, ``(x_{i+1} - rk4_nominal(x_i, u_i)) / dt``, i.e. what
    the nominal model misses over one sampling interval.
    """
    seg = Segments.from_trajectories(data)
    if n_points < 1 or n_points > len(seg):
        raise ValueError(f"need 1 <= n_points <= {len(seg)} segments")
    idx = np.arange(n_points) * (len(seg) // n_points)
    s = seg.subset(idx)
    pred = rk4_step(lambda x, u: nominal_derivative(x, u, params), s.x0, s.u, s.h)
    targets = state_difference(s.x1, pred) / s.h[:, None]
    return np.concatenate([s.x0, s.u], axis=1), targets
