"""Learned residual models: the KNODE network and the GP posterior-mean baseline.

Both are composed additively with the nominal dynamics::

    hybrid:  xdot = f(x, u) + mask * net([x, u])
    gp:      xdot = f(x, u) + mu([x, u])
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.spatial.distance import pdist

from .dynamics import (
    NU,
    NX,
    DynamicsModel,
    KnodeMpcError,
    NominalModel,
    QuadParams,
    finite_difference_jacobians,
    nominal_derivative,
    nominal_jacobians,
)

DEFAULT_LAYERS = (NX + NU, 64, 16, NX)


# ---------------------------------------------------------------------------
# multilayer perceptron
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mlp:
    """Feed-forward net, ``W[l]`` of shape ``(out, in)``.

    Inputs are standardized with ``(z - in_mean) / in_std`` before the first
    layer and features outside ``in_mask`` are zeroed. Hidden layers use
    ``activation``; the output layer is linear.
    """

    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    in_mean: np.ndarray | None = None
    in_std: np.ndarray | None = None
    activation: str = "tanh"
    in_mask: np.ndarray | None = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("need one weight matrix and bias per layer")
        Ws = tuple(np.asarray(W, dtype=float) for W in self.weights)
        bs = tuple(np.asarray(b, dtype=float) for b in self.biases)
        for i, (W, b) in enumerate(zip(Ws, bs)):
            if W.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} has incompatible shape {W.shape}/{b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("network parameters must be finite")
        mean = np.zeros(sizes[0]) if self.in_mean is None else np.asarray(self.in_mean, dtype=float)
        std = np.ones(sizes[0]) if self.in_std is None else np.asarray(self.in_std, dtype=float)
        if mean.shape != (sizes[0],) or std.shape != (sizes[0],) or np.any(std <= 0):
            raise ValueError("input normalization must match the input width with std > 0")
        mask = np.ones(sizes[0], dtype=bool) if self.in_mask is None else np.asarray(self.in_mask, dtype=bool)
        if mask.shape != (sizes[0],):
            raise ValueError("input mask must match the input width")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", Ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "in_mean", mean)
        object.__setattr__(self, "in_std", std)
        object.__setattr__(self, "in_mask", mask)
        object.__setattr__(self, "_in_scale", np.where(mask, 1.0 / std, 0.0))

    @property
    def in_scale(self) -> np.ndarray:
        """Per-feature factor applied after centering: ``in_mask / in_std``."""
        return self._in_scale

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def with_params(self, theta) -> "Mlp":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        Ws, bs, k = [], [], 0
        for W in self.weights:
            n_out, n_in = W.shape
            Ws.append(theta[k:k + W.size].reshape(n_out, n_in))
            k += W.size
            bs.append(theta[k:k + n_out].copy())
            k += n_out
        return replace(self, weights=tuple(Ws), biases=tuple(bs))

    def __call__(self, z):
        return mlp_forward(self, z)


def init_mlp(layer_sizes=DEFAULT_LAYERS, seed=0, in_mean=None, in_std=None,
             zero_output=True, in_mask=None) -> Mlp:
    """Uniform(+-1/sqrt(fan_in)) weights; the output layer starts at zero when asked."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    n = len(layer_sizes) - 1
    for i in range(n):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        if zero_output and i == n - 1:
            Ws.append(np.zeros((fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
            continue
        lim = 1.0 / np.sqrt(fan_in)
        Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(rng.uniform(-lim, lim, size=fan_out))
    return Mlp(tuple(layer_sizes), tuple(Ws), tuple(bs), in_mean, in_std, in_mask=in_mask)


def _act(net, a):
    return np.tanh(a) if net.activation == "tanh" else a


def _check_input(net, z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != net.layer_sizes[0]:
        raise ValueError(f"input width {z.shape[-1]} != {net.layer_sizes[0]}")
    return z


def mlp_forward(net: Mlp, z) -> np.ndarray:
    z = _check_input(net, z)
    h = (z - net.in_mean) * net.in_scale
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W.T + b
        if i < last:
            h = _act(net, h)
    return h


def mlp_forward_cache(net: Mlp, z) -> list:
    """Forward pass returning every layer's output, input first."""
    hs = [(z - net.in_mean) * net.in_scale]
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = hs[-1] @ W.T + b
        hs.append(_act(net, a) if i < last else a)
    return hs


def mlp_gradients(net: Mlp, z, upstream):
    """Reverse-mode gradients of ``sum(upstream * net(z))``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is a tuple of
    ``(dW, db)`` pairs summed over any batch dimensions and ``input_grad`` has
    the shape of ``z``.
    """
    z = _check_input(net, z)
    return mlp_backward(net, mlp_forward_cache(net, z), upstream)


def mlp_backward(net: Mlp, hs, upstream):
    """Backward pass given the activations ``hs`` recorded by a forward pass."""
    g = np.asarray(upstream, dtype=float)
    grads = []
    for i in range(len(net.weights) - 1, -1, -1):
        W = net.weights[i]
        h_in = hs[i]
        g2 = g.reshape(-1, g.shape[-1])
        dW = g2.T @ np.broadcast_to(h_in, g.shape[:-1] + h_in.shape[-1:]).reshape(len(g2), -1)
        db = g2.sum(axis=0)
        grads.append((dW, db))
        g = g @ W
        if i > 0 and net.activation == "tanh":
            g = g * (1.0 - h_in**2)
    grads.reverse()
    return tuple(grads), g * net.in_scale


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])


def mlp_input_jacobian(net: Mlp, z) -> np.ndarray:
    """``d net(z) / dz`` with shape ``z.shape[:-1] + (n_out, n_in)``.

    Reverse mode with one identity upstream row per output.
    """
    z = _check_input(net, z)
    hs = mlp_forward_cache(net, z)
    n_out = net.layer_sizes[-1]
    G = np.broadcast_to(np.eye(n_out), z.shape[:-1] + (n_out, n_out))
    for i in range(len(net.weights) - 1, -1, -1):
        G = G @ net.weights[i]
        if i > 0 and net.activation == "tanh":
            G = G * (1.0 - hs[i] ** 2)[..., None, :]
    return G * net.in_scale


# ---------------------------------------------------------------------------
# hybrid KNODE model
# ---------------------------------------------------------------------------

def translational_mask() -> np.ndarray:
    m = np.zeros(NX, dtype=bool)
    m[3:6] = True
    return m


def velocity_features() -> np.ndarray:
    """Input mask over ``[x u]`` keeping only the linear velocity."""
    m = np.zeros(NX + NU, dtype=bool)
    m[3:6] = True
    return m


def _stack_xu(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim == 1 and u.ndim == 1:
        return np.concatenate([x, u])
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    return np.concatenate([np.broadcast_to(x, batch + x.shape[-1:]),
                           np.broadcast_to(u, batch + u.shape[-1:])], axis=-1)


@dataclass(frozen=True)
class HybridModel(DynamicsModel):
    params: QuadParams
    net: Mlp
    residual_mask: np.ndarray = field(default_factory=lambda: np.ones(NX, dtype=bool))

    def __post_init__(self):
        mask = np.asarray(self.residual_mask, dtype=bool)
        if mask.shape != (NX,):
            raise ValueError("residual mask must have 12 entries")
        if self.net.layer_sizes[0] != NX + NU or self.net.layer_sizes[-1] != NX:
            raise ValueError("network must map 16 inputs to 12 outputs")
        object.__setattr__(self, "residual_mask", mask)

    def residual(self, x, u):
        return np.where(self.residual_mask, mlp_forward(self.net, _stack_xu(x, u)), 0.0)

    def derivative(self, x, u):
        return nominal_derivative(x, u, self.params) + self.residual(x, u)

    def jacobians(self, x, u):
        A, B = nominal_jacobians(x, u, self.params)
        Jn = mlp_input_jacobian(self.net, _stack_xu(x, u)) * self.residual_mask[:, None]
        return A + Jn[..., :NX], B + Jn[..., NX:]

    def with_net(self, net: Mlp) -> "HybridModel":
        return replace(self, net=net)


def hybrid_derivative(h: HybridModel, x, u) -> np.ndarray:
    return h.derivative(x, u)


# ---------------------------------------------------------------------------
# Gaussian-process residual baseline
# ---------------------------------------------------------------------------

class GpFitError(KnodeMpcError, ArithmeticError):
    pass


def rbf_kernel(A, B, c: float, length_scale: float) -> np.ndarray:
    """Constant-times-RBF covariance ``c * exp(-|a - b|^2 / (2 l^2))``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    d2 = (A**2).sum(1)[:, None] + (B**2).sum(1)[None, :] - 2.0 * A @ B.T
    return c * np.exp(-np.maximum(d2, 0.0) / (2.0 * length_scale**2))


@dataclass(frozen=True)
class GpModel:
    """Independent zero-mean GPs per output dimension sharing one kernel."""

    inputs: np.ndarray
    targets: np.ndarray
    c: float
    length_scale: float
    noise: float
    chol: np.ndarray
    alpha: np.ndarray

    def predict(self, z) -> np.ndarray:
        return gp_predict_mean(self, z)


def _factor(X, c, length_scale, noise2, max_doublings=6):
    K = rbf_kernel(X, X, c, length_scale)
    for _ in range(max_doublings + 1):
        try:
            L = cholesky(K + noise2 * np.eye(len(X)), lower=True)
            return K, L, noise2
        except LinAlgError:
            noise2 *= 2.0
    raise GpFitError("Gram matrix not positive definite after jitter escalation; "
                     "check for duplicate or ill-conditioned inputs")


def gp_log_marginal_likelihood(X, Y, c, length_scale, noise) -> float:
    """Sum over output dimensions of the exact log evidence."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    try:
        _, L, _ = _factor(X, c, length_scale, noise**2, max_doublings=0)
    except GpFitError:
        return -np.inf
    alpha = cho_solve((L, True), Y)
    M, D = Y.shape
    return float(-0.5 * np.sum(Y * alpha) - D * np.log(np.diag(L)).sum() - 0.5 * M * D * np.log(2 * np.pi))


def _grid_search(X, Y, noise, n=20):
    var = max(float(np.mean(Y**2)), 1e-12)
    med = float(np.median(pdist(X))) if len(X) > 1 else 1.0
    med = med if med > 0 else 1.0
    lc = np.linspace(np.log(var) - 3 * np.log(10), np.log(var) + 3 * np.log(10), n)
    ll = np.linspace(np.log(med) - 2 * np.log(10), np.log(med) + 2 * np.log(10), n)
    best = (-np.inf, lc[n // 2], ll[n // 2])
    for refine in range(2):
        for a in lc:
            for b in ll:
                v = gp_log_marginal_likelihood(X, Y, np.exp(a), np.exp(b), noise)
                if v > best[0]:
                    best = (v, a, b)
        if refine == 0:
            sc, sl = lc[1] - lc[0], ll[1] - ll[0]
            lc = np.linspace(best[1] - sc, best[1] + sc, n)
            ll = np.linspace(best[2] - sl, best[2] + sl, n)
    return float(np.exp(best[1])), float(np.exp(best[2]))


def gp_fit(X, Y, c=None, length_scale=None, noise=1e-4) -> GpModel:
    """Condition the GP on ``(X, Y)``.

    ``c`` and ``length_scale`` left as ``None`` are chosen by maximizing the
    summed log marginal likelihood over a log grid refined once around the best
    cell. ``noise`` is the observation standard deviation; the jitter ``noise**2``
    is doubled up to six times if the factorization fails.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or len(X) < 1 or Y.shape[0] != X.shape[0]:
        raise ValueError("X must be (M, d) and Y (M, k) with M >= 1")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training data must be finite")
    if c is None or length_scale is None:
        c_opt, l_opt = _grid_search(X, Y, noise)
        c = c_opt if c is None else c
        length_scale = l_opt if length_scale is None else length_scale
    _, L, noise2 = _factor(X, c, length_scale, noise**2)
    alpha = cho_solve((L, True), Y)
    return GpModel(X, Y, float(c), float(length_scale), float(np.sqrt(noise2)), L, alpha)


def gp_predict_mean(g: GpModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    Ks = rbf_kernel(z.reshape(-1, z.shape[-1]), g.inputs, g.c, g.length_scale)
    return (Ks @ g.alpha).reshape(z.shape[:-1] + (g.alpha.shape[1],))


@dataclass(frozen=True)
class GpCorrectedModel(DynamicsModel):
    params: QuadParams
    gp: GpModel

    def derivative(self, x, u):
        return nominal_derivative(x, u, self.params) + gp_predict_mean(self.gp, _stack_xu(x, u))

    def jacobians(self, x, u):
        A, B = nominal_jacobians(x, u, self.params)
        Ag, Bg = finite_difference_jacobians(lambda a, b: gp_predict_mean(self.gp, _stack_xu(a, b)), x, u)
        return A + Ag, B + Bg


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def model_to_dict(model) -> dict:
    if isinstance(model, NominalModel):
        return {"kind": "nominal", "quad": model.params.to_dict()}
    if isinstance(model, HybridModel):
        net = model.net
        return {
            "kind": "knode",
            "quad": model.params.to_dict(),
            "layer_sizes": list(net.layer_sizes),
            "activation": net.activation,
            "params": _floats(net.flat_params()),
            "in_mean": _floats(net.in_mean),
            "in_std": _floats(net.in_std),
            "in_mask": [bool(b) for b in net.in_mask],
            "residual_mask": [bool(b) for b in model.residual_mask],
        }
    if isinstance(model, GpCorrectedModel):
        g = model.gp
        return {
            "kind": "gp",
            "quad": model.params.to_dict(),
            "c": g.c,
            "length_scale": g.length_scale,
            "noise": g.noise,
            "inputs": [_floats(r) for r in g.inputs],
            "targets": [_floats(r) for r in g.targets],
        }
    raise TypeError(f"cannot serialize {type(model).__name__}")


def model_from_dict(d: dict):
    params = QuadParams(**d["quad"])
    if d["kind"] == "nominal":
        return NominalModel(params)
    if d["kind"] == "knode":
        sizes = tuple(d["layer_sizes"])
        n = len(sizes) - 1
        skeleton = Mlp(sizes, tuple(np.zeros((sizes[i + 1], sizes[i])) for i in range(n)),
                       tuple(np.zeros(sizes[i + 1]) for i in range(n)),
                       np.array(d["in_mean"]), np.array(d["in_std"]), d.get("activation", "tanh"),
                       d.get("in_mask"))
        net = skeleton.with_params(np.array(d["params"], dtype=float))
        return HybridModel(params, net, np.array(d["residual_mask"], dtype=bool))
    if d["kind"] == "gp":
        gp = gp_fit(np.array(d["inputs"]), np.array(d["targets"]), d["c"], d["length_scale"], d["noise"])
        return GpCorrectedModel(params, gp)
    raise ValueError(f"unknown model kind {d['kind']!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    return model_from_dict(json.loads(path.read_text()))
