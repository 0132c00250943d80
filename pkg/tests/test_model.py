"""Model densities: Gaussian prior, linear/logistic likelihoods, subset
additivity, unbiased minibatch scaling, CSV ingestion."""

import itertools
import math

import numpy as np
import pytest

from sldais.autodiff import Tape, check_gradient, gradient
from sldais.model import Dataset, ModelDensity

LOG_2PI = math.log(2 * math.pi)


def _linear_model(d=1, sigma=1.0):
    return ModelDensity(mu0=np.zeros(d), lam0=np.eye(d), kind="linear", sigma_obs=sigma)


def _logistic_model(d):
    return ModelDensity(mu0=np.zeros(d), lam0=np.eye(d), kind="logistic")


class TestLogPrior:
    def test_standard_normal_at_mean(self):
        m = _linear_model(d=1)
        assert m.log_prior(np.zeros(1)) == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)
        assert m.log_prior(np.zeros(1)) == pytest.approx(-0.918939, abs=1e-6)

    def test_two_dim_off_mean(self):
        m = _linear_model(d=2)
        assert m.log_prior(np.array([1.0, 0.0])) == pytest.approx(
            -LOG_2PI - 0.5, abs=1e-12
        )

    def test_maximal_at_mean_with_zero_score(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((3, 3))
        m = ModelDensity(
            mu0=rng.standard_normal(3), lam0=A @ A.T + 3 * np.eye(3),
            kind="linear", sigma_obs=0.5,
        )
        at_mode = m.log_prior(m.mu0)
        np.testing.assert_allclose(m.grad_log_prior(m.mu0), 0.0, atol=1e-12)
        for _ in range(20):
            z = m.mu0 + rng.standard_normal(3)
            assert m.log_prior(z) < at_mode

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            _linear_model(d=2).log_prior(np.zeros(3))


class TestLogLikSubset:
    def test_logistic_at_zero(self):
        rng = np.random.default_rng(1)
        data = Dataset(rng.standard_normal((10, 3)), (rng.random(10) < 0.5) * 1.0)
        m = _logistic_model(3)
        idx = np.array([0, 3, 7])
        assert m.log_lik_subset(data, np.zeros(3), idx) == pytest.approx(
            -3 * math.log(2), abs=1e-12
        )

    def test_linear_zero_residuals(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((6, 2))
        z = np.array([0.7, -1.1])
        data = Dataset(X, X @ z)
        m = _linear_model(d=2)
        idx = np.arange(4)
        assert m.log_lik_subset(data, z, idx) == pytest.approx(
            -4 * 0.5 * LOG_2PI, abs=1e-12
        )

    def test_linear_single_point(self):
        data = Dataset(np.array([[1.0]]), np.array([2.0]))
        m = _linear_model(d=1)
        assert m.log_lik_subset(data, np.zeros(1), np.array([0])) == pytest.approx(
            -0.5 * LOG_2PI - 2.0, abs=1e-12
        )

    def test_empty_idx_is_zero(self):
        data = Dataset(np.ones((3, 1)), np.zeros(3))
        m = _linear_model(d=1)
        assert m.log_lik_subset(data, np.zeros(1), np.array([], dtype=int)) == 0.0
        np.testing.assert_array_equal(
            m.grad_log_lik_subset(data, np.zeros(1), np.array([], dtype=int)),
            np.zeros(1),
        )

    def test_index_validation(self):
        data = Dataset(np.ones((3, 1)), np.zeros(3))
        m = _linear_model(d=1)
        with pytest.raises(ValueError):
            m.log_lik_subset(data, np.zeros(1), np.array([0, 3]))
        with pytest.raises(ValueError):
            m.log_lik_subset(data, np.zeros(1), np.array([1, 1]))

    def test_additivity_over_partitions(self):
        rng = np.random.default_rng(3)
        n = 12
        for kind in ("linear", "logistic"):
            X = rng.standard_normal((n, 2))
            y = (rng.random(n) < 0.5) * 1.0 if kind == "logistic" else rng.standard_normal(n)
            data = Dataset(X, y)
            m = _logistic_model(2) if kind == "logistic" else _linear_model(d=2)
            z = rng.standard_normal(2)
            full = m.log_lik_subset(data, z, np.arange(n))
            perm = rng.permutation(n)
            parts = [perm[:5], perm[5:6], perm[6:]]
            total = sum(m.log_lik_subset(data, z, p) for p in parts)
            assert total == pytest.approx(full, abs=1e-12)

    def test_minibatch_scaling_is_unbiased_by_enumeration(self):
        rng = np.random.default_rng(4)
        n, b = 7, 3
        X = rng.standard_normal((n, 2))
        data = Dataset(X, rng.standard_normal(n))
        m = _linear_model(d=2, sigma=0.8)
        z = rng.standard_normal(2)
        full = m.log_lik_subset(data, z, np.arange(n))
        subs = [
            (n / b) * m.log_lik_subset(data, z, np.array(c))
            for c in itertools.combinations(range(n), b)
        ]
        assert np.mean(subs) == pytest.approx(full, rel=1e-12)

    def test_logistic_extreme_logits_stable(self):
        data = Dataset(np.array([[100.0], [-100.0]]), np.array([1.0, 0.0]))
        m = _logistic_model(1)
        v = m.log_lik_subset(data, np.array([1.0]), np.arange(2))
        assert math.isfinite(v)
        assert v == pytest.approx(0.0, abs=1e-40)
        v_wrong = m.log_lik_subset(data, np.array([-1.0]), np.arange(2))
        assert v_wrong == pytest.approx(-200.0, rel=1e-10)


class TestGradients:
    def test_prior_score_finite_differences(self):
        rng = np.random.default_rng(5)
        A = rng.standard_normal((3, 3))
        m = ModelDensity(
            mu0=rng.standard_normal(3), lam0=A @ A.T + 2 * np.eye(3),
            kind="linear", sigma_obs=1.0,
        )

        def f(zv):
            return m.bind(zv.tape).log_prior(zv)

        assert check_gradient(f, rng.standard_normal(3)) <= 1e-5

    @pytest.mark.parametrize("kind", ["linear", "logistic"])
    def test_subset_loglik_finite_differences(self, kind):
        rng = np.random.default_rng(6)
        n, d = 9, 2
        X = rng.standard_normal((n, d))
        y = (rng.random(n) < 0.5) * 1.0 if kind == "logistic" else rng.standard_normal(n)
        data = Dataset(X, y)
        m = _logistic_model(d) if kind == "logistic" else _linear_model(d=d, sigma=0.7)
        idx = np.array([0, 2, 5, 8])

        def f(zv):
            return m.bind(zv.tape).subset(data, idx).loglik(zv)

        assert check_gradient(f, rng.standard_normal(d)) <= 1e-5

    @pytest.mark.parametrize("kind", ["linear", "logistic"])
    def test_recorded_score_equals_autodiff_of_value(self, kind):
        """The closed-form score recorded for the dynamics must match what
        the tape computes by differentiating the log-likelihood value."""
        rng = np.random.default_rng(7)
        n, d = 8, 3
        X = rng.standard_normal((n, d))
        y = (rng.random(n) < 0.5) * 1.0 if kind == "logistic" else rng.standard_normal(n)
        data = Dataset(X, y)
        m = _logistic_model(d) if kind == "logistic" else _linear_model(d=d, sigma=1.3)
        for _ in range(5):
            z0 = rng.standard_normal(d)
            tape = Tape()
            bound = m.bind(tape)
            zv = tape.leaf(z0)
            ctx = bound.subset(data, np.arange(n))
            (g_of_value,) = gradient(ctx.loglik(zv), [zv])
            g_recorded = ctx.grad(zv).value
            np.testing.assert_allclose(g_recorded, g_of_value, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(
                g_recorded,
                m.grad_log_lik_subset(data, z0, np.arange(n)),
                rtol=1e-12, atol=1e-12,
            )

    def test_tape_values_match_numpy_values(self):
        rng = np.random.default_rng(8)
        n, d = 6, 2
        data = Dataset(rng.standard_normal((n, d)), rng.standard_normal(n))
        m = _linear_model(d=d, sigma=0.9)
        z0 = rng.standard_normal(d)
        tape = Tape()
        bound = m.bind(tape)
        zv = tape.leaf(z0)
        assert bound.log_prior(zv).value == pytest.approx(m.log_prior(z0), abs=1e-12)
        idx = np.array([1, 4])
        assert bound.subset(data, idx).loglik(zv).value == pytest.approx(
            m.log_lik_subset(data, z0, idx), abs=1e-12
        )
        np.testing.assert_allclose(
            bound.grad_log_prior(zv).value, m.grad_log_prior(z0), atol=1e-14
        )

    def test_theta_gradient_flows_for_linear(self):
        """d loglik / d log_sigma through the tape vs central differences
        over models rebuilt at sigma = exp(log_sigma +- h)."""
        rng = np.random.default_rng(9)
        data = Dataset(rng.standard_normal((5, 1)), rng.standard_normal(5))
        z0 = np.array([0.3])
        ls0, h = math.log(0.6), 1e-6
        tape = Tape()
        bound = _linear_model(d=1, sigma=0.6).bind(tape)
        lik = bound.subset(data, np.arange(5)).loglik(tape.leaf(z0))
        (g,) = gradient(lik, [bound.log_sigma])

        def value(ls):
            m = ModelDensity(np.zeros(1), np.eye(1), "linear", sigma_obs=math.exp(ls))
            return m.log_lik_subset(data, z0, np.arange(5))

        fd = (value(ls0 + h) - value(ls0 - h)) / (2 * h)
        assert g == pytest.approx(fd, rel=1e-6)


class TestValidation:
    def test_logistic_rejects_nonbinary(self):
        data = Dataset(np.ones((2, 1)), np.array([0.0, 0.5]))
        with pytest.raises(ValueError):
            _logistic_model(1).validate_data(data)

    def test_prior_must_be_spd(self):
        with pytest.raises(np.linalg.LinAlgError):
            ModelDensity(np.zeros(2), -np.eye(2), "linear", sigma_obs=1.0)
        with pytest.raises(ValueError):
            ModelDensity(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]),
                         "linear", sigma_obs=1.0)

    def test_dataset_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]), np.array([0.0]))


class TestCsv:
    def test_minimal_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,y\n1,0\n2,1\n")
        data = Dataset.from_csv(p)
        assert data.n == 2 and data.d == 1
        np.testing.assert_array_equal(data.X, [[1.0], [2.0]])
        np.testing.assert_array_equal(data.y, [0.0, 1.0])

    def test_shuffled_columns(self, tmp_path):
        a = tmp_path / "a.csv"
        a.write_text("x1,x2,y\n1,2,9\n3,4,8\n")
        b = tmp_path / "b.csv"
        b.write_text("y,x1,x2\n9,1,2\n8,3,4\n")
        da, db = Dataset.from_csv(a), Dataset.from_csv(b)
        np.testing.assert_array_equal(da.X, db.X)
        np.testing.assert_array_equal(da.y, db.y)

    def test_non_numeric_cell_cites_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        rows = ["x1,y"] + ["%d,%d" % (i, i) for i in range(1, 6)] + ["oops,3"]
        p.write_text("\n".join(rows) + "\n")
        with pytest.raises(ValueError, match="line 7"):
            Dataset.from_csv(p)

    def test_ragged_row_cites_line(self, tmp_path):
        p = tmp_path / "ragged.csv"
        p.write_text("x1,y\n1,2\n3\n")
        with pytest.raises(ValueError, match="line 3"):
            Dataset.from_csv(p)

    def test_missing_y_column(self, tmp_path):
        p = tmp_path / "noy.csv"
        p.write_text("x1,x2\n1,2\n")
        with pytest.raises(ValueError, match='"y"'):
            Dataset.from_csv(p)
