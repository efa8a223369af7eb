import numpy as np
import pytest

from src.coverage_model.core.diagnostics import (
    autocovariance,
    bulk_ess,
    diagnose,
    effective_sample_size,
    mcse_mean,
    split_chains,
    split_rhat,
)


class TestSplitRhat:

    def test_iid_chains_converged(self):
        chains = np.random.default_rng(0).normal(size=(4, 5000))
        rhat = split_rhat(chains)
        assert 0.99 <= rhat <= 1.02

    def test_separated_chains(self):
        rng = np.random.default_rng(1)
        chains = np.stack([rng.normal(0.0, 0.1, size=500), rng.normal(10.0, 0.1, size=500)])
        assert split_rhat(chains) > 2.0

    def test_trend_within_chain_is_caught(self):
        rng = np.random.default_rng(2)
        drift = np.linspace(0.0, 5.0, 400)
        chains = np.stack([drift + rng.normal(0, 0.1, 400) for _ in range(4)])
        assert split_rhat(chains) > 1.05

    def test_constant_chains_undefined(self):
        assert split_rhat(np.full((4, 100), 3.0)) is None

    def test_too_short(self):
        with pytest.raises(ValueError) as excinfo:
            split_rhat(np.zeros((1, 100)))
        assert "at least 2 chains of 4 draws" in str(excinfo.value)

    def test_odd_length_drops_middle(self):
        halves = split_chains(np.arange(10.0).reshape(2, 5))
        np.testing.assert_array_equal(halves, [[0, 1], [5, 6], [3, 4], [8, 9]])


class TestEffectiveSampleSize:

    def test_autocovariance_lag_zero_is_variance(self):
        x = np.random.default_rng(3).normal(size=1000)
        assert autocovariance(x)[0] == pytest.approx(np.var(x), rel=1e-12)

    def test_iid_close_to_draw_count(self):
        chains = np.random.default_rng(4).normal(size=(4, 2000))
        ess = effective_sample_size(chains)
        assert 0.8 * 8000 < ess < 1.2 * 8000

    def test_autocorrelated_chains_lose_draws(self):
        rng = np.random.default_rng(5)
        chains = np.zeros((4, 4000))
        for t in range(1, 4000):
            chains[:, t] = 0.9 * chains[:, t - 1] + rng.normal(size=4)
        # AR(1) with rho 0.9 keeps roughly (1 - rho) / (1 + rho) of its draws
        ess = effective_sample_size(chains)
        assert 0.5 * 16000 / 19 < ess < 2.0 * 16000 / 19

    def test_constant_is_none(self):
        assert bulk_ess(np.ones((2, 50))) is None
        assert effective_sample_size(np.ones((2, 50))) is None
        assert mcse_mean(np.ones((2, 50))) is None

    def test_mcse_of_iid_mean(self):
        chains = np.random.default_rng(6).normal(size=(4, 2500))
        assert mcse_mean(chains) == pytest.approx(0.01, rel=0.25)


class TestDiagnose:

    def test_passing_report(self):
        rng = np.random.default_rng(7)
        report = diagnose({"sigma1": rng.normal(size=(4, 500)), "rho_gamma": rng.normal(size=(4, 500))})
        assert report.passed
        assert report.failing() == []
        frame = report.to_frame()
        assert list(frame.columns) == ["parameter", "mean", "sd", "rhat", "ess"]

    def test_failing_report_names_parameters(self):
        rng = np.random.default_rng(8)
        stuck = np.stack([rng.normal(0.0, 0.1, 200), rng.normal(3.0, 0.1, 200)])
        report = diagnose({"ok": rng.normal(size=(2, 200)), "mu[1,1,1]": stuck})
        assert not report.passed
        assert report.failing() == ["mu[1,1,1]"]
        assert report.max_rhat > 2.0

    def test_single_chain_has_no_rhat(self):
        report = diagnose({"sigma": np.random.default_rng(9).normal(size=(1, 100))})
        assert report.parameters[0].rhat is None
        assert report.passed
