"""Base variational distributions: reparameterized sampling, exact
densities, serialization, and tape/numpy agreement."""

import json
import math

import numpy as np
import pytest

from sldais.autodiff import Tape, check_gradient, gradient, vsum
from sldais.vardist import FullRankNormal, MeanFieldNormal, from_json

LOG_2PI = math.log(2 * math.pi)


class TestSampling:
    def test_zero_noise_returns_loc(self):
        q = MeanFieldNormal([1.5, -2.0], [0.3, -0.7])
        np.testing.assert_array_equal(q.sample_reparam(np.zeros(2)), q.loc)
        fr = FullRankNormal.init(3)
        np.testing.assert_array_equal(fr.sample_reparam(np.zeros(3)), fr.loc)

    def test_identity_scale(self):
        q = MeanFieldNormal.init(2)
        np.testing.assert_array_equal(
            q.sample_reparam(np.array([1.0, -1.0])), [1.0, -1.0]
        )

    def test_full_rank_triangular_product(self):
        # L = [[1,0],[0.5,1]]: packed raws are [log 1, 0.5, log 1]
        q = FullRankNormal(np.zeros(2), np.array([0.0, 0.5, 0.0]))
        np.testing.assert_allclose(
            q.sample_reparam(np.array([1.0, 0.0])), [1.0, 0.5], atol=1e-15
        )

    def test_moments_of_reparam_draws(self):
        rng = np.random.default_rng(11)
        raw = np.array([math.log(1.2), 0.8, math.log(0.5), -0.3, 0.4, math.log(2.0)])
        q = FullRankNormal(np.array([1.0, -2.0, 0.5]), raw)
        n = 10**5
        eps = rng.standard_normal((n, 3))
        zs = q.loc + eps @ q.tril_factor().T
        cov = q.covariance()
        sd = np.sqrt(np.diag(cov))
        np.testing.assert_array_less(
            np.abs(zs.mean(axis=0) - q.loc), 3 * sd / math.sqrt(n)
        )
        # crude SE for covariance entries of a Gaussian
        emp = np.cov(zs.T)
        se = (np.outer(sd, sd) + np.abs(cov)) / math.sqrt(n)
        np.testing.assert_array_less(np.abs(emp - cov), 3 * se)


class TestDensity:
    def test_standard_normal_at_mean(self):
        q = MeanFieldNormal.init(1)
        assert q.log_density(np.zeros(1)) == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)

    def test_full_rank_identity(self):
        q = FullRankNormal.init(2)
        assert q.log_density(np.zeros(2)) == pytest.approx(-LOG_2PI, abs=1e-12)

    def test_maximal_at_loc(self):
        rng = np.random.default_rng(12)
        q = FullRankNormal(rng.standard_normal(2), rng.standard_normal(3) * 0.5)
        at_mode = q.log_density(q.loc)
        for _ in range(20):
            assert q.log_density(q.loc + rng.standard_normal(2)) < at_mode

    @pytest.mark.parametrize("kind", ["mean-field", "full-rank"])
    def test_density_integrates_to_one_by_quadrature(self, kind):
        if kind == "mean-field":
            q = MeanFieldNormal([0.7], [math.log(1.8)])
            scale = 1.8
        else:
            q = FullRankNormal(np.array([0.7]), np.array([math.log(1.8)]))
            scale = 1.8
        grid = np.linspace(0.7 - 8 * scale, 0.7 + 8 * scale, 20001)
        dens = np.array([math.exp(q.log_density(np.array([z]))) for z in grid])
        total = np.trapezoid(dens, grid)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_diagonal_full_rank_matches_mean_field(self):
        rng = np.random.default_rng(13)
        loc = rng.standard_normal(3)
        log_s = rng.standard_normal(3) * 0.5
        mf = MeanFieldNormal(loc, log_s)
        raw = np.zeros(6)
        raw[[0, 2, 5]] = log_s  # diagonal slots for D=3
        fr = FullRankNormal(loc, raw)
        for _ in range(10):
            z = rng.standard_normal(3)
            assert fr.log_density(z) == pytest.approx(mf.log_density(z), abs=1e-12)
            np.testing.assert_allclose(
                fr.grad_log_density(z), mf.grad_log_density(z), atol=1e-12
            )
            e = rng.standard_normal(3)
            np.testing.assert_allclose(
                fr.sample_reparam(e), mf.sample_reparam(e), atol=1e-12
            )

    def test_normalization_against_multivariate_formula(self):
        rng = np.random.default_rng(14)
        q = FullRankNormal(rng.standard_normal(3), rng.standard_normal(6) * 0.4)
        cov = q.covariance()
        for _ in range(5):
            z = rng.standard_normal(3)
            r = z - q.loc
            expect = (
                -1.5 * LOG_2PI
                - 0.5 * np.linalg.slogdet(cov)[1]
                - 0.5 * r @ np.linalg.solve(cov, r)
            )
            assert q.log_density(z) == pytest.approx(expect, abs=1e-10)


class TestTapeBindings:
    @pytest.mark.parametrize("d", [1, 2, 4])
    def test_tape_matches_numpy(self, d):
        rng = np.random.default_rng(15)
        q = FullRankNormal(
            rng.standard_normal(d), rng.standard_normal(d * (d + 1) // 2) * 0.4
        )
        for _ in range(5):
            z = rng.standard_normal(d)
            eps = rng.standard_normal(d)
            tape = Tape()
            b = q.bind(tape)
            zv = tape.leaf(z)
            np.testing.assert_allclose(b.sample(eps).value, q.sample_reparam(eps), atol=1e-13)
            assert b.log_density(zv).value == pytest.approx(q.log_density(z), abs=1e-11)
            np.testing.assert_allclose(
                b.grad_log_density(zv).value, q.grad_log_density(z), atol=1e-11
            )

    def test_mean_field_tape_matches_numpy(self):
        rng = np.random.default_rng(16)
        q = MeanFieldNormal(rng.standard_normal(3), rng.standard_normal(3) * 0.5)
        z = rng.standard_normal(3)
        tape = Tape()
        b = q.bind(tape)
        zv = tape.leaf(z)
        assert b.log_density(zv).value == pytest.approx(q.log_density(z), abs=1e-12)
        np.testing.assert_allclose(
            b.grad_log_density(zv).value, q.grad_log_density(z), atol=1e-13
        )

    def test_recorded_score_equals_autodiff_of_density(self):
        rng = np.random.default_rng(17)
        q = FullRankNormal(rng.standard_normal(3), rng.standard_normal(6) * 0.3)
        z = rng.standard_normal(3)
        tape = Tape()
        b = q.bind(tape)
        zv = tape.leaf(z)
        (g_auto,) = gradient(b.log_density(zv), [zv])
        np.testing.assert_allclose(b.grad_log_density(zv).value, g_auto, atol=1e-12)

    def test_density_gradient_wrt_parameters(self):
        """AD through the real binding path vs central differences over
        distributions rebuilt at shifted raw values."""
        rng = np.random.default_rng(18)
        d = 3
        z = rng.standard_normal(d)
        loc0 = rng.standard_normal(d)
        raw0 = rng.standard_normal(d * (d + 1) // 2) * 0.4
        tape = Tape()
        b = FullRankNormal(loc0, raw0).bind(tape)
        ld = b.log_density(tape.leaf(z))
        g_loc, g_raw = gradient(ld, [b.loc, b.raw_tril])
        h = 1e-6
        for i in range(raw0.size):
            dr = np.zeros_like(raw0)
            dr[i] = h
            fd = (
                FullRankNormal(loc0, raw0 + dr).log_density(z)
                - FullRankNormal(loc0, raw0 - dr).log_density(z)
            ) / (2 * h)
            assert g_raw[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)
        for i in range(d):
            dl = np.zeros(d)
            dl[i] = h
            fd = (
                FullRankNormal(loc0 + dl, raw0).log_density(z)
                - FullRankNormal(loc0 - dl, raw0).log_density(z)
            ) / (2 * h)
            assert g_loc[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_sample_gradient_wrt_parameters(self):
        rng = np.random.default_rng(19)
        d = 3
        eps = rng.standard_normal(d)
        raw0 = rng.standard_normal(d * (d + 1) // 2) * 0.4
        loc0 = rng.standard_normal(d)
        w = rng.standard_normal(d)
        tape = Tape()
        b = FullRankNormal(loc0, raw0).bind(tape)
        out = b.sample(eps)
        from sldais.autodiff import dot
        y = dot(tape.leaf(w), out)
        (g_raw,) = gradient(y, [b.raw_tril])
        h = 1e-6
        for i in range(raw0.size):
            dr = np.zeros_like(raw0)
            dr[i] = h
            fd = (
                w @ FullRankNormal(loc0, raw0 + dr).sample_reparam(eps)
                - w @ FullRankNormal(loc0, raw0 - dr).sample_reparam(eps)
            ) / (2 * h)
            assert g_raw[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestSerialization:
    def test_mean_field_roundtrip(self):
        q = MeanFieldNormal([1.0, 2.0], [-0.5, 0.25])
        obj = json.loads(json.dumps(q.to_json()))
        q2 = from_json(obj)
        assert isinstance(q2, MeanFieldNormal)
        np.testing.assert_array_equal(q2.loc, q.loc)
        np.testing.assert_array_equal(q2.log_scale, q.log_scale)

    def test_full_rank_roundtrip(self):
        rng = np.random.default_rng(20)
        q = FullRankNormal(rng.standard_normal(3), rng.standard_normal(6))
        q2 = from_json(json.loads(json.dumps(q.to_json())))
        assert isinstance(q2, FullRankNormal)
        np.testing.assert_array_equal(q2.loc, q.loc)
        np.testing.assert_array_equal(q2.raw_tril, q.raw_tril)
        z = rng.standard_normal(3)
        assert q2.log_density(z) == q.log_density(z)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            from_json({"kind": "flow"})
