import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocds.errors import ConfigError
from ocds.model import DownstreamLoss
from ocds.optim import OptimizerConfig, train
from ocds.oracle import auc_objective
from ocds.scaling import (
    LossPoint,
    ScalingFit,
    compute_auc,
    estimate_flops,
    fit_data_scaling,
    fit_reducible_power_law,
    fit_scaling_law,
    huber,
    huber_lse_objective,
    points_digest,
    power_law_auc,
    predict_loss,
    read_fit,
    read_points_csv,
    write_fit,
)

from conftest import quad_data

# Published fitted constants for conventional and selected-data pre-training.
CONVENTIONAL = ScalingFit(A=8.09e2, B=7.50e5, E=2.829, alpha=0.397, beta=0.651)
SELECTED = ScalingFit(A=6.21e3, B=1.76e5, E=2.829, alpha=0.518, beta=0.585)


def log_params(fit):
    return np.array([np.log(fit.A), np.log(fit.B), np.log(fit.E), fit.alpha, fit.beta])


def grid_points(fit, sizes=(160e6, 470e6, 1e9, 1.7e9), n_tokens=20):
    Ds = np.logspace(9, 11, n_tokens)
    return [LossPoint(N, D, float(predict_loss(fit, N, D))) for N in sizes for D in Ds]


class TestPredictLoss:
    def test_published_extrapolation(self):
        np.testing.assert_allclose(predict_loss(CONVENTIONAL, 175e9, 300e9), 2.882, atol=0.002)
        np.testing.assert_allclose(predict_loss(SELECTED, 175e9, 300e9), 2.872, atol=0.002)

    def test_asymptote(self):
        np.testing.assert_allclose(predict_loss(CONVENTIONAL, 1e300, 1e300), CONVENTIONAL.E, rtol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(n=st.floats(1e6, 1e12), d=st.floats(1e6, 1e13), f=st.floats(1.01, 10))
    def test_decreasing_and_bounded(self, n, d, f):
        base = predict_loss(CONVENTIONAL, n, d)
        assert predict_loss(CONVENTIONAL, n * f, d) < base
        assert predict_loss(CONVENTIONAL, n, d * f) < base
        assert base > CONVENTIONAL.E


class TestObjective:
    def test_exact_points_zero(self):
        pts = grid_points(CONVENTIONAL, n_tokens=5)
        assert huber_lse_objective(log_params(CONVENTIONAL), pts) < 1e-25

    def test_quadratic_regime(self):
        r = np.array([-3e-4, 5e-4, 1e-3])
        np.testing.assert_allclose(huber(r, 1e-3).sum(), 0.5 * np.sum(r ** 2), rtol=1e-14)

    def test_linear_regime(self):
        delta = 1e-3
        np.testing.assert_allclose(huber(np.array([2 * delta]), delta).sum(), 1.5 * delta ** 2, rtol=1e-14)

    def test_single_point_residual(self):
        # The residual is taken in log space.
        delta = 1e-3
        N, D = 1e9, 1e10
        L = float(predict_loss(CONVENTIONAL, N, D)) * np.exp(-2 * delta)
        val = huber_lse_objective(log_params(CONVENTIONAL), [LossPoint(N, D, L)], delta)
        np.testing.assert_allclose(val, 1.5 * delta ** 2, rtol=1e-8)

    def test_nonpositive_loss(self):
        with pytest.raises(ConfigError):
            LossPoint(1e9, 1e10, 0.0)


class TestStageFits:
    def test_data_scaling_round_trip(self):
        D = np.logspace(9, 11, 12)
        L = 3.1 + 420.0 / D ** 0.33
        fit = fit_data_scaling(D, L)
        np.testing.assert_allclose([fit.offset, fit.scale, fit.exponent], [3.1, 420.0, 0.33], rtol=1e-4)

    def test_constant_losses_flagged(self):
        fit = fit_data_scaling(np.logspace(9, 11, 6), np.full(6, 2.5))
        assert fit.degenerate

    def test_noisy_median(self):
        D = np.logspace(6, 10, 20)
        truth = np.array([2.0, 5000.0, 0.4])
        errs = []
        for seed in range(100):
            r = np.random.default_rng(seed)
            L = (2.0 + 5000.0 / D ** 0.4) * (1 + 0.01 * r.standard_normal(D.size))
            fit = fit_data_scaling(D, L)
            errs.append(np.abs(np.array([fit.offset, fit.scale, fit.exponent]) - truth) / truth)
        assert np.all(np.median(errs, axis=0) < 0.10)

    def test_too_few_sizes(self):
        pts = [LossPoint(1e9, D, 3.0 + 1 / D) for D in (1e9, 2e9, 3e9, 4e9)]
        with pytest.raises(ConfigError):
            fit_scaling_law(pts)


class TestFitScalingLaw:
    def test_round_trip(self):
        pts = grid_points(CONVENTIONAL)
        fit = fit_scaling_law(pts)
        got = np.array([fit.A, fit.B, fit.E, fit.alpha, fit.beta])
        want = np.array([CONVENTIONAL.A, CONVENTIONAL.B, CONVENTIONAL.E, CONVENTIONAL.alpha, CONVENTIONAL.beta])
        assert np.all(np.abs(got - want) / want < 0.05)
        pred = np.array([predict_loss(fit, p.N, p.D) for p in pts])
        assert np.max(np.abs(pred - [p.L for p in pts])) < 0.005
        assert fit.objective <= fit.init_objective

    def test_permutation_identical(self):
        pts = grid_points(CONVENTIONAL, n_tokens=8)
        perm = np.random.default_rng(0).permutation(len(pts))
        a = fit_scaling_law(pts)
        b = fit_scaling_law([pts[i] for i in perm])
        assert (a.A, a.B, a.E, a.alpha, a.beta) == (b.A, b.B, b.E, b.alpha, b.beta)

    def test_adam_path(self):
        fit = fit_scaling_law(grid_points(CONVENTIONAL, n_tokens=8), optimizer="adam", max_steps=200)
        assert fit.objective <= fit.init_objective

    def test_unknown_optimizer(self):
        with pytest.raises(ConfigError):
            fit_scaling_law(grid_points(CONVENTIONAL, n_tokens=5), optimizer="sgd")


class TestAuc:
    def test_ones(self):
        assert compute_auc([1, 1, 1]) == 3

    def test_empty(self):
        with pytest.raises(ConfigError):
            compute_auc([])

    def test_constant(self):
        assert compute_auc([0.25] * 8) == 2.0

    def test_matches_oracle(self, quad):
        data = quad_data([0.0, 1.0, 3.0])
        J = DownstreamLoss(quad_data([0.5, 2.0], role="downstream"))
        gamma, theta0 = np.array([0.2, 0.3, 0.5]), np.array([-1.0])
        traj = train(quad, data, gamma, theta0, 25, OptimizerConfig("gd", 0.1))
        curve = [J.value(quad, traj.checkpoints[t]) for t in range(1, 26)]
        assert compute_auc(curve) == auc_objective(quad, data, gamma, theta0, J, 25, 0.1).value


class TestReduciblePowerLaw:
    def test_round_trip(self):
        t = np.arange(11, 211)
        fit = fit_reducible_power_law(1.0 + 2.0 / t ** 0.5, 10)
        np.testing.assert_allclose([fit.C, fit.c, fit.irreducible], [2.0, 0.5, 1.0], rtol=1e-4)
        assert not fit.flagged

    def test_increasing_flagged(self):
        assert fit_reducible_power_law(np.linspace(1, 2, 10), 0).flagged

    def test_too_few(self):
        with pytest.raises(ConfigError):
            fit_reducible_power_law([3.0, 2.0, 1.5], 0)

    def test_closed_form_auc(self):
        np.testing.assert_allclose(power_law_auc(2.0, 0.5, 1.0, 100.0), 2.0 / 0.5 * (10.0 - 1.0), rtol=1e-14)
        np.testing.assert_allclose(power_law_auc(3.0, 1.0, 1.0, np.e), 3.0, rtol=1e-14)


class TestFlops:
    def test_solver_estimate(self):
        rec = estimate_flops(1.7e9, 50e9, 160e6, 1.64e8, 125e6, 5)
        assert abs(rec["solver"] - 5.1e19) / 5.1e19 < 0.1
        assert abs(rec["solver"] - 0.49e20) / 0.49e20 < 0.1

    def test_pretraining(self):
        np.testing.assert_allclose(estimate_flops(1.7e9, 50e9, 160e6, 1.64e8, 125e6, 5)["pretraining"], 5.1e20)

    def test_no_checkpoints(self):
        rec = estimate_flops(1.7e9, 50e9, 160e6, 1.64e8, 125e6, 0)
        assert rec["solver"] == 6 * 160e6 * 50e9

    @pytest.mark.parametrize("key", ["N", "D", "N_prx", "D_prx", "N_score"])
    def test_linear(self, key):
        base = dict(N=1.7e9, D=50e9, N_prx=160e6, D_prx=1.64e8, N_score=125e6, M=5)
        a = estimate_flops(**base)
        b = estimate_flops(**{**base, key: base[key] * 3})
        c = estimate_flops(**{**base, key: base[key] * 5})
        for stage in ("solver", "scorer", "pretraining"):
            # Equal increments in the count give equal increments in FLOPs.
            np.testing.assert_allclose((c[stage] - a[stage]) / 4, (b[stage] - a[stage]) / 2, rtol=1e-12)

    def test_nonpositive(self):
        with pytest.raises(ConfigError):
            estimate_flops(0, 1, 1, 1, 1, 1)


class TestIO:
    def test_points_csv(self, tmp_path):
        (tmp_path / "p.csv").write_text("N,D,L\n1e9,2e10,3.1\n2e9,2e10,3.0\n")
        pts = read_points_csv(tmp_path / "p.csv")
        assert pts == [LossPoint(1e9, 2e10, 3.1), LossPoint(2e9, 2e10, 3.0)]

    def test_bad_header(self, tmp_path):
        (tmp_path / "p.csv").write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ConfigError):
            read_points_csv(tmp_path / "p.csv")

    def test_fit_round_trip(self, tmp_path):
        pts = grid_points(CONVENTIONAL, n_tokens=5)
        write_fit(tmp_path / "f.json", CONVENTIONAL, pts)
        back = read_fit(tmp_path / "f.json")
        assert (back.A, back.B, back.E, back.alpha, back.beta) == (8.09e2, 7.50e5, 2.829, 0.397, 0.651)
        assert json.loads((tmp_path / "f.json").read_text())["input_digest"] == points_digest(pts)
