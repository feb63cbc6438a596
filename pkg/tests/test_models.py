import itertools

import numpy as np
import pytest

from knode_mpc.dynamics import NX, QuadParams, finite_difference_jacobians, hover_state, nominal_derivative
from knode_mpc.models import (
    GpCorrectedModel,
    GpFitError,
    HybridModel,
    Mlp,
    flatten_grads,
    gp_fit,
    gp_log_marginal_likelihood,
    gp_predict_mean,
    hybrid_derivative,
    init_mlp,
    load_model,
    mlp_forward,
    mlp_gradients,
    mlp_input_jacobian,
    rbf_kernel,
    save_model,
    translational_mask,
    velocity_features,
)

P = QuadParams()


def random_net(sizes, seed, scale=1.0, **kw):
    rng = np.random.default_rng(seed)
    Ws = tuple(scale * rng.normal(size=(sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1))
    bs = tuple(scale * rng.normal(size=sizes[i + 1]) for i in range(len(sizes) - 1))
    return Mlp(tuple(sizes), Ws, bs, **kw)


def random_xu(rng):
    x = np.zeros(12)
    x[:3] = rng.uniform(-4, 4, 3)
    x[3:6] = rng.uniform(-3, 3, 3)
    x[6:9] = rng.uniform(-0.4, 0.4, 3)
    x[9:] = rng.uniform(-1, 1, 3)
    return x, np.array([rng.uniform(3, 8), *rng.uniform(-0.05, 0.05, 3)])


def numeric_param_grad(net, z, upstream, eps=1e-6):
    theta = net.flat_params()
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += eps
        tm[k] -= eps
        fp = np.sum(upstream * mlp_forward(net.with_params(tp), z))
        fm = np.sum(upstream * mlp_forward(net.with_params(tm), z))
        g[k] = (fp - fm) / (2 * eps)
    return g


class TestMlp:
    def test_zero_net(self):
        net = Mlp((16, 8, 12), (np.zeros((8, 16)), np.zeros((12, 8))), (np.zeros(8), np.zeros(12)))
        np.testing.assert_array_equal(mlp_forward(net, np.arange(16.0)), 0.0)

    def test_constant_net(self):
        b = np.linspace(-1, 1, 12)
        net = Mlp((16, 8, 12), (np.ones((8, 16)), np.zeros((12, 8))), (np.ones(8), b))
        np.testing.assert_array_equal(mlp_forward(net, np.arange(16.0)), b)

    def test_against_hand_rolled_forward(self):
        net = random_net((2, 3, 2), 0)
        z = np.array([0.3, -1.2])
        W1, W2 = net.weights
        b1, b2 = net.biases
        h = [np.tanh(sum(W1[i, j] * z[j] for j in range(2)) + b1[i]) for i in range(3)]
        out = [sum(W2[i, j] * h[j] for j in range(3)) + b2[i] for i in range(2)]
        np.testing.assert_allclose(mlp_forward(net, z), out, atol=1e-14)

    def test_normalization_applied(self):
        net = random_net((2, 3, 2), 1, in_mean=[1.0, 2.0], in_std=[2.0, 4.0])
        plain = random_net((2, 3, 2), 1)
        np.testing.assert_allclose(net(np.array([3.0, 6.0])), plain(np.array([1.0, 1.0])), atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mlp_forward(random_net((2, 3, 2), 0), np.zeros(3))
        with pytest.raises(ValueError):
            Mlp((2, 3), (np.zeros((2, 3)),), (np.zeros(3),))

    def test_init_output_layer_is_zero(self):
        net = init_mlp(seed=3)
        assert net.layer_sizes == (16, 64, 16, 12)
        np.testing.assert_array_equal(net.weights[-1], 0.0)
        lim = 1 / np.sqrt(16)
        assert np.all(np.abs(net.weights[0]) <= lim)
        np.testing.assert_array_equal(init_mlp(seed=3).flat_params(), net.flat_params())

    def test_flat_roundtrip(self):
        net = random_net((16, 8, 12), 2)
        again = net.with_params(net.flat_params())
        np.testing.assert_array_equal(again.flat_params(), net.flat_params())
        assert net.n_params == 16 * 8 + 8 + 8 * 12 + 12


class TestMlpGradients:
    def test_zero_upstream(self):
        net = random_net((16, 8, 12), 0)
        grads, gz = mlp_gradients(net, np.ones(16), np.zeros(12))
        np.testing.assert_array_equal(flatten_grads(grads), 0.0)
        np.testing.assert_array_equal(gz, 0.0)

    def test_linear_net_input_gradient(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(3, 4))
        net = Mlp((4, 3), (W,), (np.zeros(3),), activation="identity")
        up = rng.normal(size=3)
        _, gz = mlp_gradients(net, rng.normal(size=4), up)
        np.testing.assert_array_equal(gz, W.T @ up)

    @pytest.mark.parametrize("seed", range(10))
    def test_parameter_and_input_gradients_vs_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        net = random_net((16, 8, 12), seed, scale=0.5,
                         in_mean=rng.normal(size=16), in_std=rng.uniform(0.5, 2, 16))
        z = rng.normal(size=16)
        up = rng.normal(size=12)
        grads, gz = mlp_gradients(net, z, up)
        g = flatten_grads(grads)
        g_fd = numeric_param_grad(net, z, up)
        rel = np.max(np.abs(g - g_fd)) / np.max(np.abs(g_fd))
        assert rel < 1e-6
        gz_fd = np.array([
            (np.sum(up * net(z + e)) - np.sum(up * net(z - e))) / 2e-6 for e in np.eye(16) * 1e-6
        ])
        assert np.max(np.abs(gz - gz_fd)) / np.max(np.abs(gz_fd)) < 1e-6

    def test_batched_gradients_sum(self):
        rng = np.random.default_rng(7)
        net = random_net((16, 8, 12), 7)
        Z, U = rng.normal(size=(5, 16)), rng.normal(size=(5, 12))
        gb, gzb = mlp_gradients(net, Z, U)
        total = sum(flatten_grads(mlp_gradients(net, Z[i], U[i])[0]) for i in range(5))
        np.testing.assert_allclose(flatten_grads(gb), total, atol=1e-12)
        np.testing.assert_allclose(gzb[2], mlp_gradients(net, Z[2], U[2])[1], atol=1e-14)

    def test_input_jacobian(self):
        rng = np.random.default_rng(8)
        net = random_net((16, 8, 12), 8, scale=0.5, in_std=rng.uniform(0.5, 2, 16))
        Z = rng.normal(size=(3, 16))
        J = mlp_input_jacobian(net, Z)
        for i in range(3):
            for k in range(12):
                np.testing.assert_allclose(J[i, k], mlp_gradients(net, Z[i], np.eye(12)[k])[1], atol=1e-13)


class TestHybrid:
    def test_zero_net_equals_nominal_bitwise(self):
        rng = np.random.default_rng(0)
        h = HybridModel(P, init_mlp(seed=0))
        for _ in range(5):
            x, u = random_xu(rng)
            np.testing.assert_array_equal(hybrid_derivative(h, x, u), nominal_derivative(x, u, P))

    def test_mask_restricts_residual(self):
        rng = np.random.default_rng(1)
        h = HybridModel(P, random_net((16, 8, 12), 1), translational_mask())
        x, u = random_xu(rng)
        diff = h.derivative(x, u) - nominal_derivative(x, u, P)
        keep = translational_mask()
        np.testing.assert_array_equal(diff[~keep], 0.0)
        assert np.all(diff[keep] != 0)

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(2)
        h = HybridModel(P, random_net((16, 8, 12), 2, scale=0.3))
        X, U = zip(*[random_xu(rng) for _ in range(4)])
        X, U = np.array(X), np.array(U)
        A, B = h.jacobians(X, U)
        Af, Bf = finite_difference_jacobians(h.derivative, X, U)
        np.testing.assert_allclose(A, Af, rtol=1e-7, atol=1e-6)
        np.testing.assert_allclose(B, Bf, rtol=1e-7, atol=1e-6)

    def test_input_mask_hides_features(self):
        rng = np.random.default_rng(4)
        h = HybridModel(P, random_net((16, 8, 12), 4, in_mask=velocity_features()))
        x, u = random_xu(rng)
        x2, u2 = random_xu(rng)
        x2[3:6] = x[3:6]
        np.testing.assert_array_equal(h.residual(x, u), h.residual(x2, u2))
        A, B = h.jacobians(x, u)
        An, Bn = HybridModel(P, init_mlp(seed=0)).jacobians(x, u)
        np.testing.assert_array_equal(B, Bn)
        np.testing.assert_array_equal((A - An)[:, [0, 1, 2, 6, 7, 8, 9, 10, 11]], 0.0)
        Af, _ = finite_difference_jacobians(h.derivative, x, u)
        np.testing.assert_allclose(A, Af, rtol=1e-7, atol=1e-6)

    def test_input_mask_parameter_gradients(self):
        rng = np.random.default_rng(5)
        net = random_net((16, 6, 12), 5, scale=0.4, in_mask=velocity_features())
        z = np.concatenate(random_xu(rng))
        up = rng.normal(size=12)
        grads, gz = mlp_gradients(net, z, up)
        np.testing.assert_allclose(flatten_grads(grads), numeric_param_grad(net, z, up), rtol=1e-6, atol=1e-9)
        np.testing.assert_array_equal(gz[~velocity_features()], 0.0)

    def test_bad_mask(self):
        with pytest.raises(ValueError):
            HybridModel(P, init_mlp(), np.ones(5, dtype=bool))
        with pytest.raises(ValueError):
            init_mlp(in_mask=np.ones(5, dtype=bool))

    def test_json_roundtrip_is_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        net = random_net((16, 8, 12), 3, in_mean=rng.normal(size=16), in_std=rng.uniform(0.5, 2, 16),
                         in_mask=velocity_features())
        h = HybridModel(P, net, translational_mask())
        save_model(h, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(back.net.flat_params(), net.flat_params())
        np.testing.assert_array_equal(back.net.in_std, net.in_std)
        np.testing.assert_array_equal(back.residual_mask, h.residual_mask)
        np.testing.assert_array_equal(back.net.in_mask, net.in_mask)
        save_model(back, tmp_path / "m2.json")
        assert (tmp_path / "m.json").read_text() == (tmp_path / "m2.json").read_text()


class TestGp:
    def test_kernel_values(self):
        a = np.array([[0.3, -1.0]])
        assert rbf_kernel(a, a, 2.5, 0.7)[0, 0] == 2.5
        b = a + np.array([[0.7, 0.0]])
        assert rbf_kernel(a, b, 2.5, 0.7)[0, 0] == pytest.approx(2.5 * np.exp(-0.5), rel=1e-14)

    def test_single_point_shrinkage(self):
        X, Y = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]])
        c, s = 2.0, 0.1
        g = gp_fit(X, Y, c=c, length_scale=1.0, noise=s)
        np.testing.assert_allclose(gp_predict_mean(g, X[0]), Y[0] * c / (c + s**2), rtol=1e-14)

    def test_against_dense_solve(self):
        X = np.array([[0.0], [0.5], [1.3]])
        Y = np.array([[1.0], [-0.5], [0.25]])
        c, ell, s = 1.5, 0.6, 0.05
        g = gp_fit(X, Y, c=c, length_scale=ell, noise=s)
        z = np.array([[0.2], [0.9], [2.0]])

        def k(a, b):
            return c * np.exp(-((a - b) ** 2) / (2 * ell**2))

        K = np.array([[k(a, b) for b in X[:, 0]] for a in X[:, 0]]) + s**2 * np.eye(3)
        ks = np.array([[k(a, b) for b in X[:, 0]] for a in z[:, 0]])
        expected = ks @ np.linalg.solve(K, Y)
        np.testing.assert_allclose(gp_predict_mean(g, z), expected, atol=1e-10)

    def test_far_queries_decay_to_zero(self):
        rng = np.random.default_rng(0)
        X, Y = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
        g = gp_fit(X, Y, c=1.0, length_scale=0.5, noise=1e-3)
        z = np.full(3, 30 * 0.5 + np.abs(X).max())
        assert np.linalg.norm(gp_predict_mean(g, z)) < 1e-8

    def test_interpolation_and_permutation(self):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(30, 4)), rng.normal(size=(30, 3))
        g = gp_fit(X, Y, c=1.0, length_scale=0.8, noise=1e-10)
        np.testing.assert_allclose(gp_predict_mean(g, X), Y, atol=1e-6)
        perm = rng.permutation(30)
        g2 = gp_fit(X[perm], Y[perm], c=1.0, length_scale=0.8, noise=1e-10)
        z = rng.normal(size=(10, 4))
        np.testing.assert_allclose(gp_predict_mean(g2, z), gp_predict_mean(g, z), atol=1e-10)

    def test_cholesky_residual(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 5))
        g = gp_fit(X, rng.normal(size=(40, 2)), c=2.0, length_scale=1.5, noise=1e-4)
        K = rbf_kernel(X, X, 2.0, 1.5)
        resid = g.chol @ g.chol.T - (K + g.noise**2 * np.eye(40))
        assert np.abs(resid).sum(1).max() < 1e-10 * np.abs(K).sum(1).max()

    def test_duplicate_inputs_fail_loudly(self):
        X = np.ones((5, 2))
        with pytest.raises(GpFitError):
            gp_fit(X, np.arange(5.0)[:, None], c=1e6, length_scale=1.0, noise=1e-12)

    def test_hyperparameter_search_beats_neighbours(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-2, 2, size=(40, 2))
        Y = np.sin(X[:, :1] * 1.5) + 0.01 * rng.normal(size=(40, 1))
        g = gp_fit(X, Y, noise=1e-2)
        best = gp_log_marginal_likelihood(X, Y, g.c, g.length_scale, 1e-2)
        for fc, fl in itertools.product([0.8, 1.25], [0.8, 1.25]):
            assert best >= gp_log_marginal_likelihood(X, Y, g.c * fc, g.length_scale * fl, 1e-2)

    def test_corrected_model_and_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        X, Y = rng.normal(size=(10, 16)), rng.normal(size=(10, 12))
        m = GpCorrectedModel(P, gp_fit(X, Y, c=1.0, length_scale=3.0))
        x = hover_state()
        u = P.hover_input
        np.testing.assert_allclose(m.derivative(x, u),
                                   nominal_derivative(x, u, P) + gp_predict_mean(m.gp, np.r_[x, u]))
        save_model(m, tmp_path / "gp.json")
        back = load_model(tmp_path / "gp.json")
        np.testing.assert_array_equal(back.gp.alpha, m.gp.alpha)
        A, B = m.jacobians(x, u)
        assert A.shape == (NX, NX) and B.shape == (NX, 4)
