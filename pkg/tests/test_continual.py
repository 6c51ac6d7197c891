import numpy as np
import pytest

from netspectra.continual import (
    METHODS,
    BudgetClippedWarning,
    ConservationBasis,
    ForgettingSetup,
    build_basis,
    cf_penalty,
    forgetting_experiment,
    pca_basis,
    project_velocity,
    two_task_run,
    within_task_accuracy,
)
from netspectra.data import Dataset, split_tasks, synth_blobs
from netspectra.hessian import EigenBasis, QuadraticModel, dense_hessian, eigh, quadratic_loss_predict
from netspectra.nn import init_network
from netspectra.pca import covariance
from netspectra.trainer import DivergenceError, Schedule, TrainConfig, train


def orthonormal_rows(k, n, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(n, k)))
    return q.T


@pytest.fixture(scope="module")
def task_setup():
    data = synth_blobs(4, 5, 20, 5.0, seed=11)
    split = split_tasks(data, [[0, 1], [2, 3]])
    net = init_network([5, 6, 4], "uniform", 2)
    net, _, _ = train(net, split.task_a, TrainConfig(Schedule("constant", 0.05), batch_size=8, epochs=40, seed=0))
    return net, split


class TestPenalty:
    def test_zero_at_anchor(self, rng):
        w = rng.normal(size=10)
        basis = ConservationBasis(orthonormal_rows(3, 10, 0), [3.0, 2.0, 1.0], w, np.arange(10))
        value, grad = cf_penalty(w, basis, 1000.0)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_hand_example(self):
        d = np.array([0.6, 0.8])
        basis = ConservationBasis(d[None, :], [2.0], np.zeros(2), np.arange(2))
        value, grad = cf_penalty(3.0 * d, basis, 1.0)
        assert value == pytest.approx(18.0)
        np.testing.assert_allclose(grad, 12.0 * d)

    def test_gradient_finite_difference(self, rng):
        basis = ConservationBasis(orthonormal_rows(4, 12, 1), [4.0, 3.0, 0.5, 0.1], rng.normal(size=15), np.arange(3, 15))
        w = rng.normal(size=15)
        _, grad = cf_penalty(w, basis, 2.5)
        step = 1e-6
        fd = np.array([
            (cf_penalty(w + step * e, basis, 2.5)[0] - cf_penalty(w - step * e, basis, 2.5)[0]) / (2 * step)
            for e in np.eye(15)
        ])
        assert np.max(np.abs(grad - fd)) <= 1e-6 * np.max(np.abs(grad))
        np.testing.assert_array_equal(grad[:3], 0.0)

    def test_sign_flip_invariance(self, rng):
        dirs = orthonormal_rows(3, 8, 2)
        anchor, w = rng.normal(size=(2, 8))
        a = ConservationBasis(dirs, [3.0, 2.0, 1.0], anchor, np.arange(8))
        b = ConservationBasis(dirs * np.array([[1.0], [-1.0], [-1.0]]), [3.0, 2.0, 1.0], anchor, np.arange(8))
        assert cf_penalty(w, a, 7.0)[0] == pytest.approx(cf_penalty(w, b, 7.0)[0], rel=1e-14)

    def test_matches_quadratic_model(self, small_net, blobs, rng):
        # with the full Hessian basis the penalty is 2 lambda_cf times the quadratic loss increase
        h = eigh(dense_hessian(small_net, blobs.inputs, blobs.labels).matrix)
        pos = h.values > 0
        basis = ConservationBasis(h.vectors[pos], h.values[pos], small_net.params, np.arange(small_net.n_params))
        model = QuadraticModel(0.0, small_net.params, EigenBasis(h.values[pos], h.vectors[pos]))
        w = small_net.params + 0.01 * rng.normal(size=small_net.n_params)
        assert cf_penalty(w, basis, 3.0)[0] == pytest.approx(6.0 * quadratic_loss_predict(model, w), rel=1e-10)

    def test_negative_constant(self):
        basis = ConservationBasis(np.eye(2)[:1], [1.0], np.zeros(2), np.arange(2))
        with pytest.raises(ValueError):
            cf_penalty(np.zeros(2), basis, -1.0)


class TestProjection:
    def basis(self, strengths=(4.0, 2.0, 1.0), n=9, seed=3):
        return ConservationBasis(orthonormal_rows(len(strengths), n, seed), strengths, np.zeros(n), np.arange(n))

    def test_gamma_zero(self, rng):
        v = rng.normal(size=9)
        np.testing.assert_array_equal(project_velocity(v, self.basis(), 0.0), v)

    def test_parallel_removed(self):
        basis = self.basis((5.0,))
        v = -2.0 * basis.directions[0]
        np.testing.assert_allclose(project_velocity(v, basis, 1.0), 0.0, atol=1e-15)

    def test_ratio_weighting(self, rng):
        basis = self.basis()
        v = rng.normal(size=9)
        out = project_velocity(v, basis, 1.0)
        before, after = basis.directions @ v, basis.directions @ out
        assert after[0] == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(after[1:], (1 - np.array([0.5, 0.25])) * before[1:], rtol=1e-12)

    def test_idempotent_on_leading_direction(self, rng):
        basis = self.basis()
        once = project_velocity(rng.normal(size=9), basis, 1.0)
        twice = project_velocity(once, basis, 1.0)
        assert basis.directions[0] @ twice == pytest.approx(basis.directions[0] @ once, abs=1e-14)

    def test_groups_use_own_leader(self):
        dirs = np.eye(4)[:3]
        basis = ConservationBasis(dirs, [8.0, 2.0, 1.0], np.zeros(4), np.arange(4), groups=np.array([0, 0, 1]))
        np.testing.assert_allclose(basis.leading_ratios(), [1.0, 0.25, 1.0])
        np.testing.assert_allclose(project_velocity(np.ones(4), basis, 1.0), [0.0, 0.75, 0.0, 1.0])

    def test_zero_leader(self):
        basis = ConservationBasis(np.eye(3)[:2], [0.0, 0.0], np.zeros(3), np.arange(3))
        with pytest.raises(ValueError):
            project_velocity(np.ones(3), basis, 1.0)

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            project_velocity(np.ones(9), self.basis(), 1.5)


class TestBuildBasis:
    def test_singular_directions(self, rng):
        data = synth_blobs(6, 6, 10, 4.0, seed=1)
        net = init_network([6, 6, 6], "normal", 1)
        basis = build_basis(net, "singular", data.inputs, data.labels, 5, scope="all", bias_fraction=0.2)
        layout = net.layout
        for layer in range(2):
            w = layout.block(layer, "weight").slice
            local = np.array([np.any(d[w] != 0) for d in basis.directions])
            block = basis.directions[local]
            assert len(block) == 5
            np.testing.assert_allclose(block @ block.T, np.eye(5), atol=1e-12)
            assert np.all(np.diff(basis.strengths[local]) <= 0)
        # each 6-entry bias block keeps ceil(0.2 * 6) = 2 Hessian directions
        assert len(basis) == 2 * 5 + 2 * 2
        np.testing.assert_array_equal(basis.anchor, net.params)

    def test_hessian_directions(self, task_setup):
        net, split = task_setup
        basis = build_basis(net, "hessian", split.task_a.inputs, split.task_a.labels, 6, scope="last")
        assert len(basis) == 6
        assert np.all(np.diff(basis.strengths) <= 0) and np.all(basis.strengths >= 0)
        np.testing.assert_allclose(np.linalg.norm(basis.directions, axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(basis.indices, net.layout.scope_indices("last"))
        np.testing.assert_array_equal(basis.anchor, net.params)

    def test_fraction_rounds_up(self, task_setup):
        net, split = task_setup
        basis = build_basis(net, "hessian", split.task_a.inputs, split.task_a.labels, 0.2, scope="last")
        assert len(basis) == int(np.ceil(0.2 * len(net.layout.scope_indices("last"))))

    def test_budget_clipped(self, task_setup):
        net, split = task_setup
        with pytest.warns(BudgetClippedWarning):
            basis = build_basis(net, "singular", split.task_a.inputs, split.task_a.labels, 9, scope="last")
        assert np.sum(basis.groups == 0) == 4

    def test_unknown_method(self, task_setup):
        net, split = task_setup
        with pytest.raises(ValueError):
            build_basis(net, "fisher", split.task_a.inputs, split.task_a.labels)


class TestPcaBasis:
    def test_inverse_variance_strengths(self):
        x = np.random.default_rng(4).normal(size=(30, 6)) * np.array([3.0, 2.0, 1.0, 0.5, 0.2, 0.1])
        pca = covariance(x)
        basis = pca_basis(pca, 4, x[-1], np.arange(6))
        np.testing.assert_allclose(basis.strengths, 1.0 / pca.variances[:4][::-1])
        assert np.all(np.diff(basis.strengths) < 0)

    def test_zero_variance(self):
        pca = covariance(np.ones((5, 3)))
        with pytest.raises(ValueError):
            pca_basis(pca, 2, np.ones(3), np.arange(3))


class TestTwoTaskRun:
    def test_none_equals_plain_training(self, task_setup):
        net, split = task_setup
        result = two_task_run(net, split, "none", 0.0, 5, 0.02, scope="last", batch_size=8, seed=3)
        cfg = TrainConfig(Schedule("constant", 0.02), batch_size=8, epochs=5, seed=3, trainable="last")
        plain, _, _ = train(net, split.task_b, cfg)
        assert result.net.params.tobytes() == plain.params.tobytes()
        assert len(result.acc_task1) == 5
        assert result.selected_epoch == int(np.argmax(result.acc_task1 + result.acc_task2))

    def test_full_projection_freezes(self, task_setup):
        net, split = task_setup
        idx = net.layout.scope_indices("last")
        basis = ConservationBasis(np.eye(len(idx)), np.ones(len(idx)), net.params, idx)
        result = two_task_run(net, split, "hess-grad", 1.0, 3, 0.05, basis, scope="last", batch_size=8)
        np.testing.assert_allclose(result.net.params, net.params, atol=1e-14)
        before = within_task_accuracy(net, split.task_a, [0, 1])
        np.testing.assert_allclose(result.within_task1, before)

    def test_missing_basis(self, task_setup):
        net, split = task_setup
        with pytest.raises(ValueError):
            two_task_run(net, split, "sv-loss", 1.0, 1, 0.01)

    def test_unknown_method(self, task_setup):
        net, split = task_setup
        with pytest.raises(ValueError):
            two_task_run(net, split, "ewc", 1.0, 1, 0.01)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_huge_penalty_aborts(self, task_setup):
        net, split = task_setup
        basis = build_basis(net, "hessian", split.task_a.inputs, split.task_a.labels, 4, scope="last")
        moved = net.with_params(net.params + 0.1)
        with pytest.raises(DivergenceError):
            two_task_run(moved, split, "hess-loss", 1e12, 3, 0.05, basis, scope="last", batch_size=8)

    def test_rows(self, task_setup):
        net, split = task_setup
        result = two_task_run(net, split, "none", 0.0, 2, 0.01)
        epoch, a1, a2, total, *_, method, _ = result.rows[1]
        assert (epoch, method) == (1, "none")
        assert total == pytest.approx(a1 + a2)


class TestWithinTask:
    def test_restricted_argmax(self):
        net = init_network([2, 3], "normal", 0)
        params = np.zeros(net.n_params)
        params[6:] = [0.0, 1.0, 5.0]  # class 2 dominates, then class 1
        data = Dataset(np.zeros((2, 2)), np.array([0, 1]), 3)
        assert within_task_accuracy(net, data, [0, 1], params) == 0.5


class TestExperiment:
    def test_methods_share_start(self):
        setup = ForgettingSetup(per_class=40, pretrain_epochs=5, task1_epochs=3, epochs=2, lambda_cf=10.0)
        results = forgetting_experiment(setup, METHODS)
        assert set(results) == set(METHODS)
        assert all(len(r.acc_task1) == 2 for r in results.values())

    def test_no_protection_forgets(self):
        result = forgetting_experiment(ForgettingSetup(lambda_cf=10.0), ["none"])["none"]
        assert result.selected[0] < 0.3
        assert result.selected[1] > 0.9
