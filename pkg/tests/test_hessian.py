import numpy as np
import pytest

from netspectra.hessian import (
    ConvergenceWarning,
    DegenerateModeWarning,
    EigenBasis,
    QuadraticModel,
    decay_rate,
    decay_target,
    decay_variance,
    dense_hessian,
    drift_variance_combination,
    eigh,
    exp_decay_coordinate,
    hvp,
    hvp_operator,
    lanczos_topk,
    load_eigenbasis,
    matched_lr,
    mean_update,
    quadratic_loss_predict,
    save_eigenbasis,
    select_decay_exponent,
    simulate_gd_coordinate,
)
from netspectra.io import CorruptFileError
from netspectra.nn import Network, gradient, init_network


def fd_hvp(net, x, y, v, weight_decay=0.0, step=1e-4):
    eps = step / np.linalg.norm(v)
    plus = gradient(net, x, y, weight_decay, net.params + eps * v)
    minus = gradient(net, x, y, weight_decay, net.params - eps * v)
    return (plus - minus) / (2 * eps)


def printed_variance(samples):
    """Variance estimator with the 1/T normalization over T + 1 samples."""
    t = len(samples) - 1
    return np.sum(samples**2) / t - np.sum(samples) ** 2 / t**2


def random_symmetric(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    return (a + a.T) / 2


class TestHvp:
    def test_linear_softmax_matches_quadratic_form(self, rng):
        # a single linear layer on one sample: H = (diag(p) - pp^T) kron [x, 1] blocks
        net = init_network([3, 2], "normal", 0)
        x, y = rng.normal(size=(1, 3)), np.array([1])
        h = dense_hessian(net, x, y).matrix
        v = rng.normal(size=net.n_params)
        np.testing.assert_allclose(hvp(net, x, y, v), h @ v, rtol=1e-12, atol=1e-14)

    def test_finite_difference_500_params(self, rng):
        net = init_network([20, 20, 4], "normal", 1)
        assert net.n_params == 504
        x, y = rng.normal(size=(32, 20)), rng.integers(0, 4, 32)
        v = rng.normal(size=net.n_params)
        exact = hvp(net, x, y, v)
        approx = fd_hvp(net, x, y, v)
        assert np.max(np.abs(exact - approx)) / np.max(np.abs(exact)) <= 1e-5

    def test_weight_decay_term(self, rng):
        net = init_network([4, 5, 3], "normal", 2)
        x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
        v = rng.normal(size=net.n_params)
        np.testing.assert_allclose(hvp(net, x, y, v, 0.25) - hvp(net, x, y, v, 0.0), 0.5 * v, atol=1e-14)

    def test_linearity(self, rng):
        net = init_network([5, 6, 3], "normal", 3)
        x, y = rng.normal(size=(10, 5)), rng.integers(0, 3, 10)
        v, w = rng.normal(size=(2, net.n_params))
        lhs = hvp(net, x, y, 2.5 * v - 0.7 * w)
        rhs = 2.5 * hvp(net, x, y, v) - 0.7 * hvp(net, x, y, w)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.max(np.abs(rhs))

    def test_shape_mismatch(self, random_batch):
        net = init_network([6, 8, 4])
        with pytest.raises(ValueError):
            hvp(net, *random_batch, np.ones(net.n_params + 1))

    def test_restricted_operator_is_diagonal_block(self, small_net, blobs):
        idx = small_net.layout.scope_indices("last")
        full = dense_hessian(small_net, blobs.inputs, blobs.labels).matrix
        op = hvp_operator(small_net, blobs.inputs, blobs.labels, indices=idx)
        v = np.random.default_rng(0).normal(size=len(idx))
        np.testing.assert_allclose(op(v), full[np.ix_(idx, idx)] @ v, rtol=1e-10, atol=1e-13)


class TestDenseHessian:
    def test_symmetry(self, small_net, blobs):
        dense = dense_hessian(small_net, blobs.inputs, blobs.labels)
        assert dense.max_asymmetry <= 1e-7 * np.max(np.abs(dense.matrix))
        np.testing.assert_array_equal(dense.matrix, dense.matrix.T)

    def test_rows_are_basis_hvps(self, random_batch):
        net = init_network([6, 8, 4], "normal", 4)
        x, y = random_batch
        raw = dense_hessian(net, x, y)
        for i in (0, 17, net.n_params - 1):
            e = np.zeros(net.n_params)
            e[i] = 1.0
            np.testing.assert_allclose(raw.matrix[i], hvp(net, x, y, e), atol=raw.max_asymmetry + 1e-15)

    def test_weight_decay_shifts_spectrum(self, small_net, blobs):
        h0 = np.linalg.eigvalsh(dense_hessian(small_net, blobs.inputs, blobs.labels).matrix)
        h1 = np.linalg.eigvalsh(dense_hessian(small_net, blobs.inputs, blobs.labels, 0.03).matrix)
        np.testing.assert_allclose(h1, h0 + 0.06, atol=1e-9)

    def test_cap_refuses(self, random_batch):
        net = init_network([6, 8, 4])
        with pytest.raises(ValueError, match="lanczos"):
            dense_hessian(net, *random_batch, cap=50)


class TestEigh:
    def test_diagonal(self):
        basis = eigh(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_array_equal(basis.values, [3.0, 2.0, 1.0])
        np.testing.assert_allclose(np.abs(basis.vectors), np.eye(3)[[0, 2, 1]])

    def test_reconstruction(self):
        a = random_symmetric(30, 1)
        basis = eigh(a)
        rebuilt = (basis.vectors.T * basis.values) @ basis.vectors
        assert np.linalg.norm(a - rebuilt) <= 1e-8 * np.linalg.norm(a)
        assert np.all(np.diff(basis.values) <= 0)

    def test_identity(self):
        np.testing.assert_allclose(eigh(np.eye(5)).values, 1.0)

    def test_magnitude_ordering(self):
        basis = eigh(np.diag([1.0, -5.0, 3.0]), ordering="magnitude")
        np.testing.assert_array_equal(basis.values, [-5.0, 3.0, 1.0])
        assert basis.ordering == "magnitude"

    def test_nonfinite(self):
        with pytest.raises(ValueError):
            eigh(np.array([[1.0, np.nan], [np.nan, 1.0]]))


class TestLanczos:
    def test_diagonal_top3(self):
        d = np.arange(1.0, 101.0)
        basis = lanczos_topk(lambda v: d * v, 100, 3, seed=0)
        np.testing.assert_allclose(basis.values, [100, 99, 98], atol=1e-8)
        assert basis.converged

    def test_rank_one(self, rng):
        u = rng.normal(size=40)
        u /= np.linalg.norm(u)
        a = 7.5 * np.outer(u, u)
        basis = lanczos_topk(lambda v: a @ v, 40, 1)
        assert basis.values[0] == pytest.approx(7.5, rel=1e-12)
        assert abs(basis.vectors[0] @ u) == pytest.approx(1.0, abs=1e-10)

    def test_rayleigh_bound_and_residuals(self):
        a = random_symmetric(80, 2)
        basis = lanczos_topk(lambda v: a @ v, 80, 6, seed=3)
        for v, h, r in zip(basis.vectors, basis.values, basis.residuals):
            assert abs(v @ a @ v - h) <= 1e-6 * max(1.0, abs(h))
            assert r == pytest.approx(np.linalg.norm(a @ v - h * v))

    def test_matches_dense_on_network(self, small_net, blobs):
        dense = eigh(dense_hessian(small_net, blobs.inputs, blobs.labels).matrix, ordering="magnitude")
        op = hvp_operator(small_net, blobs.inputs, blobs.labels)
        basis = lanczos_topk(op, small_net.n_params, 8, seed=1)
        np.testing.assert_allclose(basis.values, dense.values[:8], rtol=1e-6)

    def test_flags_nonconvergence(self):
        d = np.linspace(1.0, 2.0, 200)
        with pytest.warns(ConvergenceWarning):
            basis = lanczos_topk(lambda v: d * v, 200, 5, max_iters=12)
        assert not basis.converged
        assert len(basis) == 5

    @pytest.mark.parametrize("k", [0, 10])
    def test_invalid_k(self, k):
        with pytest.raises(ValueError):
            lanczos_topk(lambda v: v, 10, k)


class TestEigenBasisIO:
    def test_round_trip(self, tmp_path):
        basis = eigh(random_symmetric(6, 4), source="hessian-dense").top(4)
        save_eigenbasis(basis, tmp_path / "basis.bin")
        back = load_eigenbasis(tmp_path / "basis.bin")
        assert back.values.tobytes() == basis.values.tobytes()
        assert back.vectors.tobytes() == basis.vectors.tobytes()
        assert (back.source, back.ordering) == ("hessian-dense", "algebraic")

    def test_truncated(self, tmp_path):
        save_eigenbasis(eigh(np.eye(3)), tmp_path / "basis.bin")
        raw = (tmp_path / "basis.bin").read_bytes()
        (tmp_path / "basis.bin").write_bytes(raw[:-16])
        with pytest.raises(CorruptFileError):
            load_eigenbasis(tmp_path / "basis.bin")

    def test_mismatched_rows(self):
        with pytest.raises(ValueError):
            EigenBasis(np.ones(3), np.eye(2))


class TestQuadraticModel:
    def test_at_minimum(self):
        basis = eigh(np.diag([2.0, 5.0]))
        model = QuadraticModel(1.25, np.array([0.3, -0.4]), basis)
        assert quadratic_loss_predict(model, model.mu) == 1.25

    def test_single_mode_offset(self):
        model = QuadraticModel(0.5, np.zeros(1), eigh(np.array([[2.0]])))
        assert quadratic_loss_predict(model, np.array([3.0])) == pytest.approx(9.5)

    def test_hessian_rebuild(self):
        a = random_symmetric(5, 6)
        model = QuadraticModel(0.0, np.zeros(5), eigh(a))
        np.testing.assert_allclose(model.hessian(), a, atol=1e-12)


class TestMeanUpdate:
    def test_scalar(self):
        assert mean_update(1.0, 0.0, 1.0, 0.1, 1, 0.0) == pytest.approx(-0.1)

    def test_fixed_point(self):
        a = random_symmetric(4, 7)
        mu = np.arange(4.0)
        np.testing.assert_allclose(mean_update(mu, mu, a, 0.05, 1, 0.0), 0.0, atol=1e-14)

    def test_weight_decay_pulls_below_minimum(self):
        a = random_symmetric(4, 8)
        mu = np.array([1.0, -2.0, 0.5, 3.0])
        lr, s, lam = 0.05, 4, 0.01
        # the printed form scales only the first term by 1/S, so H mu survives
        expected = -(lr / s) * (a @ mu + 2 * lam * mu) + lr * a @ mu
        np.testing.assert_allclose(mean_update(mu, mu, a, lr, s, lam), expected, rtol=1e-14)
        np.testing.assert_allclose(mean_update(mu, mu, a, lr, 1, lam), -lr * 2 * lam * mu, atol=1e-15)

    def test_eigenbasis_matches_matrix(self, rng):
        a = random_symmetric(6, 9)
        w, mu = rng.normal(size=(2, 6))
        np.testing.assert_allclose(
            mean_update(w, mu, eigh(a), 0.1, 3, 0.02), mean_update(w, mu, a, 0.1, 3, 0.02), atol=1e-13
        )


class TestExpDecay:
    def test_initial_value(self):
        assert exp_decay_coordinate(0.7, 0.2, 1.5, 0.1, 0.01, 0.0) == 0.7

    def test_known_value(self):
        assert exp_decay_coordinate(1.0, 0.0, 1.0, 0.1, 0.0, 10) == pytest.approx(np.exp(-1), rel=1e-14)
        assert exp_decay_coordinate(1.0, 0.0, 1.0, 0.1, 0.0, 10) == pytest.approx(0.367879, abs=1e-6)

    def test_limit(self):
        b = 0.8 / (1 + 2 * 0.05 / 2.0)
        assert decay_target(0.8, 2.0, 0.05) == pytest.approx(b)
        assert exp_decay_coordinate(3.0, 0.8, 2.0, 0.1, 0.05, 1e5) == pytest.approx(b, abs=1e-14)

    def test_exponents(self):
        assert decay_rate(2.0, 0.1, 0.5, "printed") == pytest.approx(0.25)
        assert decay_rate(2.0, 0.1, 0.5, "consistent") == pytest.approx(0.3)
        with pytest.raises(ValueError):
            decay_rate(2.0, 0.1, 0.5, "other")

    def test_degenerate(self):
        with pytest.warns(DegenerateModeWarning):
            assert exp_decay_coordinate(0.4, 1.0, 0.0, 0.1, 0.0, 50) == 0.4

    def test_euler_first_order(self):
        # forward Euler of the mean update with S=1, lambda=0 deviates by at most eta^2 h^2 t / 2 per unit amplitude
        h, mu, w0, steps = 1.5, 0.4, 2.0, 200
        t = np.arange(steps + 1)
        for lr in (0.02, 0.01, 0.005):
            euler = simulate_gd_coordinate(w0, mu, h, lr, 0.0, steps)
            dev = np.abs(euler - exp_decay_coordinate(w0, mu, h, lr, 0.0, t))
            assert np.all(dev <= 0.5 * (lr * h) ** 2 * t * abs(w0 - mu) + 1e-15)


class TestMatchedLr:
    @pytest.mark.parametrize("exponent", ["printed", "consistent"])
    def test_reproduces_gd(self, exponent):
        h, lr, lam, steps = 3.0, 0.05, 0.2, 60
        sim = simulate_gd_coordinate(1.3, -0.6, h, lr, lam, steps)
        eta = matched_lr(h, lr, lam, exponent)
        closed = exp_decay_coordinate(1.3, -0.6, h, eta, lam, np.arange(steps + 1), exponent)
        np.testing.assert_allclose(closed, sim, atol=1e-12)

    def test_outside_contraction(self):
        with pytest.raises(ValueError):
            matched_lr(30.0, 0.1, 0.0)

    def test_integrator_prefers_consistent_with_weight_decay(self):
        name, errors = select_decay_exponent([0.5, 1.0, 2.0], 0.01, 0.5, 200)
        assert name == "consistent"
        assert errors["consistent"] < errors["printed"]


class TestDecayVariance:
    def test_constant_trajectory(self):
        b = decay_target(0.6, 2.0, 0.1)
        assert decay_variance(b, 0.6, 2.0, 0.05, 0.1, 100) == pytest.approx(0.0, abs=1e-30)

    def test_matches_samples(self):
        # rate eta (h + 2 lambda) = 0.1 with target zero
        h, lr, lam, steps = 1.6, 0.05, 0.2, 100
        assert lr * (h + 2 * lam) == pytest.approx(0.1)
        t = np.arange(steps + 1)
        samples = 1.7 * np.exp(-0.1 * t)
        assert decay_variance(1.7, 0.0, h, lr, lam, steps) == pytest.approx(printed_variance(samples), abs=1e-9)

    def test_vanishes_for_long_runs(self):
        values = [decay_variance(1.0, 0.0, 1.0, 0.1, 0.0, T) for T in (100, 1000, 100_000)]
        assert np.all(np.diff(values) < 0)
        assert values[-1] < 1e-4

    def test_nonpositive_rate(self):
        with pytest.raises(ValueError):
            decay_variance(1.0, 0.0, -1.0, 0.1, 0.0, 10)


class TestDriftCombination:
    def test_single_mode(self):
        assert drift_variance_combination([1.0, 0.0, 0.0], [5.0, 2.0, 1.0]) == 5.0

    def test_equal_weights(self):
        d = np.full(2, np.sqrt(0.5))
        assert drift_variance_combination(d, [2.0, 4.0]) == pytest.approx(3.0)

    def test_constant_variances(self, rng):
        d = rng.normal(size=7)
        d /= np.linalg.norm(d)
        assert drift_variance_combination(d, np.full(7, 0.3)) == pytest.approx(0.3)

    def test_not_normalized(self):
        with pytest.raises(ValueError):
            drift_variance_combination([1.0, 1.0], [1.0, 1.0])


def test_zero_network_hessian_is_finite(random_batch):
    net = Network((6, 8, 4), np.zeros(92))
    assert np.all(np.isfinite(dense_hessian(net, *random_batch).matrix))
