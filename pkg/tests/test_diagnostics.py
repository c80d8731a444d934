import numpy as np
import pytest

from bdrlab.diagnostics import (
    cauchy_check,
    destruction_report,
    f_max,
    grad_oracle,
    hessian_top_eigen,
    metrics,
    old_loss_distribution,
    peak_bound,
)
from bdrlab.tensor import Tensor, matmul


class TestFMax:
    def test_definitional(self):
        rise, step = f_max([1.0, 0.5, 2.5, 0.3])
        assert rise == 1.5 and step == 2

    def test_monotone_decreasing(self):
        rise, step = f_max([3.0, 2.0, 1.0])
        assert rise == 0.0 and step == 0

    def test_constant(self):
        rise, _ = f_max([1.0, 1.0, 1.0])
        assert rise == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            f_max([])


class TestCauchyCheck:
    def test_equal_contributions(self):
        a = np.array([1.0, 0.0])
        lhs, rhs, gap = cauchy_check(a, a.copy(), 2)
        assert lhs == 1.0 and rhs == 1.0 and gap == 0.0

    def test_orthogonal_contributions(self):
        lhs, rhs, gap = cauchy_check([1.0, 0.0], [0.0, 1.0], 2)
        assert lhs == pytest.approx(0.5)
        assert rhs == 0.0
        assert gap == pytest.approx(0.5)

    def test_cancellation(self):
        a = np.array([2.0, -1.0])
        lhs, rhs, gap = cauchy_check(a, -a, 3)
        norm_sq = float(a @ a)
        assert lhs == 0.0
        assert rhs == pytest.approx(-4.0 * norm_sq / 9.0)
        assert gap == pytest.approx(4.0 * norm_sq / 9.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cauchy_check([1.0], [1.0, 2.0], 1)

    def test_gap_identity_battery(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            dim = rng.integers(1, 60)
            n = int(rng.integers(1, 300))
            a, b = rng.standard_normal(dim), rng.standard_normal(dim)
            _, _, gap = cauchy_check(a, b, n)
            assert gap == pytest.approx(float((a - b) @ (a - b)) / (n * n), abs=1e-10)

    def test_lhs_never_below_rhs(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            a, b = rng.standard_normal(10), rng.standard_normal(10)
            lhs, rhs, _ = cauchy_check(a, b, 4)
            assert lhs >= rhs - 1e-8


class TestMetrics:
    def test_plain_mean_and_last(self):
        assert metrics([80.0, 70.0, 60.0]) == (70.0, 60.0)

    def test_single_phase(self):
        assert metrics([88.5]) == (88.5, 88.5)

    def test_not_count_weighted(self):
        # the average ignores how many classes each phase holds
        avg, _ = metrics([100.0, 0.0])
        assert avg == 50.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics([])


class TestOldLossDistribution:
    def test_constant_trace(self):
        box = old_loss_distribution([2.0] * 10)
        assert box.minimum == box.q1 == box.median == box.q3 == box.maximum == 2.0
        assert box.outlier_count == 0

    def test_linear_interpolation_convention(self):
        box = old_loss_distribution(np.arange(1.0, 101.0))
        assert box.median == pytest.approx(50.5)
        assert box.q1 == pytest.approx(25.75)
        assert box.q3 == pytest.approx(75.25)

    def test_single_spike_is_one_outlier(self):
        trace = [1.0] * 30 + [50.0]
        box = old_loss_distribution(trace)
        assert box.outlier_count == 1
        assert box.maximum == 50.0


class TestHessianTopEigen:
    def test_identity_hessian(self):
        grad_fn = lambda v: v.copy()  # loss 0.5 ||v||^2
        assert hessian_top_eigen(grad_fn, np.zeros(4), iters=500, tol=1e-9) == pytest.approx(1.0, abs=1e-3)

    def test_diagonal_closed_form(self):
        scale = np.array([1.0, 3.0])
        grad_fn = lambda v: scale * v
        assert hessian_top_eigen(grad_fn, np.zeros(2), iters=2000, tol=1e-10) == pytest.approx(3.0, abs=1e-3)

    def test_additivity_of_summed_quadratics(self):
        # two quadratics with top eigenvalues 1 and 2 on the same axis
        a = np.diag([1.0, 0.2])
        b = np.diag([2.0, 0.1])
        grad_fn = lambda v: (a + b) @ v
        assert hessian_top_eigen(grad_fn, np.zeros(2), iters=2000, tol=1e-10) == pytest.approx(3.0, abs=1e-3)

    def test_through_autodiff_gradients(self):
        rng = np.random.default_rng(2)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        eig = np.array([5.0, 3.0, 2.0, 1.0, 0.5, 0.1])
        matrix = (q * eig) @ q.T

        def loss(v):
            row = Tensor(v.data[None, :]) if not isinstance(v, Tensor) else v
            return 0.5 * (matmul(row, matrix) * row).sum()

        def grad_fn(vec):
            leaf = Tensor(vec[None, :].copy(), requires_grad=True)
            (0.5 * (matmul(leaf, matrix) * leaf).sum()).backward()
            return leaf.grad.ravel()

        assert hessian_top_eigen(grad_fn, np.zeros(6), iters=3000, tol=1e-10) == pytest.approx(5.0, rel=1e-3)

    def test_random_psd_battery(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            dim = int(rng.integers(2, 21))
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            eig = rng.uniform(0.1, 10.0, dim)
            matrix = (q * eig) @ q.T
            est = hessian_top_eigen(lambda v: matrix @ v, np.zeros(dim), iters=5000, tol=1e-10, seed=int(rng.integers(1 << 31)))
            assert est == pytest.approx(eig.max(), rel=1e-3)

    def test_nonconvergence_warns_and_returns_estimate(self):
        matrix = np.diag([2.0, 1.0])
        with pytest.warns(RuntimeWarning, match="did not converge"):
            estimate = hessian_top_eigen(lambda v: matrix @ v, np.zeros(2), iters=50, tol=0.0)
        assert estimate == pytest.approx(2.0, abs=1e-6)


class TestGradOracle:
    def test_matches_manual_gradient(self):
        grad_fn = grad_oracle(lambda x: (x * x).sum() * 0.5)
        np.testing.assert_allclose(grad_fn(np.array([1.0, -2.0])), [1.0, -2.0])


class TestDestructionReport:
    def test_peak_and_convergence(self):
        losses = [0.1, 0.5, 2.0, 1.0, 0.3, 0.2]
        epochs = [0, 0, 1, 1, 2, 2]
        report = destruction_report(losses, epochs)
        assert report.initial == 0.1
        assert report.peak == 2.0
        assert report.f_max == pytest.approx(1.9)
        assert report.step_of_peak == 2
        assert report.converged == pytest.approx(0.25)

    def test_f_max_never_negative(self):
        report = destruction_report([3.0, 1.0, 0.5], [0, 0, 1])
        assert report.f_max == 0.0


class TestPeakBound:
    def test_zero_steps_zero_bound(self):
        assert peak_bound(0, 0.1, 5.0, 0.0) == 0.0

    def test_formula(self):
        assert peak_bound(4, 0.5, 2.0, 3.0) == pytest.approx(0.5 * 4 * 0.25 * 2.0 * 3.0)


class TestCrossRunCorrelation:
    def test_grad_traffic_correlates_with_peak_destruction(self):
        # across runs, more squared-gradient traffic up to the peak should
        # come with a larger peak rise in the old loss
        from scipy.stats import spearmanr

        from bdrlab.config import ExperimentConfig
        from bdrlab.cli import build_stream
        from bdrlab.training import run_experiment

        cfg = ExperimentConfig(classes=6, per_class=48, dim=4, initial_classes=2,
                               increment=2, epochs=4, batch_size=16, hidden=(24, 24))
        traffic, rises = [], []
        for seed in range(12):
            stream = build_stream(cfg, seed)
            report = run_experiment(stream, cfg.train_config("ce", seed)).report
            for entry in report["phases"]:
                if entry["bound"] is None:
                    continue
                traffic.append(entry["bound"]["grad_sq_sum_to_peak"])
                rises.append(entry["bound"]["f_max"])
        correlation = spearmanr(traffic, rises).statistic
        assert correlation > 0.0
