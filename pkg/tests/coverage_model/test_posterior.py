import math

import numpy as np
import pytest
from scipy.special import expit

from src.coverage_model.core.errors import InsufficientDrawsError, MissingDenominatorError, ModelDomainError
from src.coverage_model.core.model import Hyperparams, LatentField, ModelDims, ModelKind, ObservationData
from src.coverage_model.core.posterior import (
    coverage_estimates,
    coverage_from_mu,
    forecast_mean,
    pointwise_log_likelihood,
    predict_forward,
    regional_aggregate,
    summarize,
    validation_metrics,
    waic,
    waic_from_pointwise,
)
from src.coverage_model.core.sampler import Draws, run_chains
from src.coverage_model.models.configs import ChainConfig, PriorConfig, ScenarioSpec
from src.coverage_model.models.records import DenominatorRow, DenominatorTable
from src.coverage_model.models.reports import EstimateRow, EstimateTable
from src.coverage_model.workflows.simulate import generate_synthetic

DYNAMIC = ("gamma", "phi", "delta", "omega")


def _constant_draws(dims: ModelDims, model: ModelKind = ModelKind.IDML, n_chains: int = 2, n_draws: int = 5,
                    latent: LatentField = None, hyper: Hyperparams = None) -> Draws:
    """Draws that repeat one (latent, hyper) state."""
    latent = latent or LatentField.zeros(dims)
    hyper = hyper or Hyperparams(sigma_src=np.array([1.0, 1.0, 0.3]))
    components = {
        name: np.broadcast_to(np.asarray(value, dtype=float), (n_chains, n_draws) + np.shape(value)).copy()
        for name, value in latent.components(model).items()
    }
    hypers = {name: np.full((n_chains, n_draws), value) for name, value in hyper.to_dict(model).items()}
    return Draws(model=model, dims=dims, latent=components, hyper=hypers)


def _random_draws(dims: ModelDims, seed: int, n_chains: int = 2, n_draws: int = 50) -> Draws:
    """IDML draws with standard normal latent values and default hyperparameters."""
    rng = np.random.default_rng(seed)
    components = {
        name: rng.standard_normal((n_chains, n_draws) + np.shape(value))
        for name, value in LatentField.zeros(dims).components(ModelKind.IDML).items()
    }
    hypers = {name: np.full((n_chains, n_draws), value) for name, value in Hyperparams().to_dict(ModelKind.IDML).items()}
    return Draws(model=ModelKind.IDML, dims=dims, latent=components, hyper=hypers)


class TestCoverageEstimates:

    def test_ratio_converted_back(self):
        mu = np.empty((3, 1, 2, 1))
        mu[:, :, 0, :] = math.log(0.9 / 0.1)
        mu[:, :, 1, :] = 0.0
        p, labels = coverage_from_mu(mu, ["DTP1", "DTP3_RATIO"], {"DTP3_RATIO": ("DTP1", "DTP3")})
        assert labels == ["DTP1", "DTP3"]
        np.testing.assert_allclose(p[:, 0, 1, 0], 0.45, atol=1e-12)

    def test_unknown_denominator_left_alone(self):
        mu = np.zeros((2, 1, 1, 1))
        p, labels = coverage_from_mu(mu, ["DTP3_RATIO"], {"DTP3_RATIO": ("DTP1", "DTP3")})
        assert labels == ["DTP3_RATIO"]
        np.testing.assert_allclose(p, 0.5)

    def test_summary_quantiles(self):
        p = np.linspace(0.0, 1.0, 101).reshape(101, 1, 1, 1)
        row = summarize(p, ["KEN"], ["MCV1"], [2010]).rows[0]
        assert row.mean_pct == pytest.approx(50.0)
        assert (row.q025_pct, row.q50_pct, row.q975_pct) == pytest.approx((2.5, 50.0, 97.5))

    def test_labels_follow_axes(self):
        dims = ModelDims(C=2, V=1, T=2)
        latent = LatentField.zeros(dims)
        latent.beta = np.array([0.0, math.log(3.0)])
        table = coverage_estimates(_constant_draws(dims, latent=latent), ["GHA", "NGA"], ["MCV1"], [2000, 2001])
        assert [(r.country, r.year) for r in table.rows] == [("GHA", 2000), ("GHA", 2001), ("NGA", 2000), ("NGA", 2001)]
        assert table.rows[2].mean_pct == pytest.approx(75.0)


class TestPredictForward:

    def test_rows_and_years(self):
        dims = ModelDims(C=2, V=3, T=4)
        table = predict_forward(_constant_draws(dims), ["A", "B"], ["V1", "V2", "V3"], [2000, 2001, 2002, 2003],
                                steps=2, seed=1)
        assert len(table) == 2 * 3 * 2
        assert {r.year for r in table.rows} == {2004, 2005}
        assert all(r.is_prediction for r in table.rows)

    def test_ar_decay_without_noise(self):
        dims = ModelDims(C=1, V=1, T=3)
        latent = LatentField.zeros(dims)
        latent.gamma = np.array([0.0, 0.0, 2.0])
        hyper = Hyperparams(sigma_src=np.array([1.0, 1.0, 0.3]), rho_gamma=0.5, sigma_gamma=1e-12,
                            sigma_phi=1e-12, sigma_delta=1e-12, sigma_omega=1e-12)
        table = predict_forward(_constant_draws(dims, latent=latent, hyper=hyper), ["A"], ["V1"], [1, 2, 3], steps=2)
        assert [r.mean_pct for r in table.rows] == pytest.approx([100 * expit(1.0), 100 * expit(0.5)], abs=1e-9)

    def test_bdsl_keeps_intercept(self):
        dims = ModelDims(C=1, V=1, T=2)
        latent = LatentField.zeros(dims)
        latent.lam = 1.0
        hyper = Hyperparams(sigma_gamma=1e-12, sigma_phi=1e-12, sigma_delta=1e-12, sigma_omega=1e-12)
        draws = _constant_draws(dims, model=ModelKind.BDSL, latent=latent, hyper=hyper)
        table = predict_forward(draws, ["A"], ["V1"], [1, 2], steps=1)
        assert table.rows[0].mean_pct == pytest.approx(100 * expit(1.0), abs=1e-9)

    def test_steps_must_be_positive(self):
        with pytest.raises(ValueError):
            predict_forward(_constant_draws(ModelDims(1, 1, 2)), ["A"], ["V1"], [1, 2], steps=0)

    def test_frozen_dynamics_repeat_last_year(self):
        dims = ModelDims(C=2, V=2, T=4)
        draws = _random_draws(dims, seed=11)
        for name in DYNAMIC:
            draws.latent[name][..., -1] = 0.0
            draws.hyper[f"rho_{name}"][:] = 0.0
            draws.hyper[f"sigma_{name}"][:] = 0.0
        countries, vaccines = ["A", "B"], ["V1", "V2"]
        table = predict_forward(draws, countries, vaccines, [2000, 2001, 2002, 2003], steps=2, seed=4)
        for year in (2004, 2005):
            expected = summarize(expit(draws.shared_mean()[..., -1:]), countries, vaccines, [year], is_prediction=True)
            got = [r for r in table.rows if r.year == year]
            assert len(got) == len(expected.rows)
            for a, b in zip(got, expected.rows):
                assert (a.country, a.vaccine) == (b.country, b.vaccine)
                assert (a.mean_pct, a.q025_pct, a.q50_pct, a.q975_pct) == pytest.approx(
                    (b.mean_pct, b.q025_pct, b.q50_pct, b.q975_pct), abs=1e-9)

    def test_noise_free_forecast_follows_ar_recursion(self):
        dims = ModelDims(C=3, V=2, T=5)
        draws = _random_draws(dims, seed=12)
        rng = np.random.default_rng(13)
        for name in DYNAMIC:
            draws.hyper[f"rho_{name}"] = rng.uniform(-0.9, 0.9, size=(draws.n_chains, draws.n_draws))
            draws.hyper[f"sigma_{name}"][:] = 0.0
        steps = 3
        power = np.arange(1, steps + 1)

        def propagated(name: str) -> np.ndarray:
            last = draws.pooled_latent(name)[..., -1]
            rho = draws.pooled_hyper(f"rho_{name}").reshape((-1,) + (1,) * last.ndim)
            return rho ** power * last[..., None]

        expected = (
            draws.pooled_latent("beta")[:, :, None, None]
            + draws.pooled_latent("alpha")[:, None, :, None]
            + draws.pooled_latent("psi")[:, :, :, None]
            + propagated("gamma")[:, None, None, :]
            + propagated("phi")[:, :, None, :]
            + propagated("delta")[:, None, :, :]
            + propagated("omega")
        )
        np.testing.assert_allclose(forecast_mean(draws, steps, np.random.default_rng(0)), expected, atol=1e-12)


class TestRegionalAggregate:

    @staticmethod
    def _denominators(populations):
        return DenominatorTable(rows=[DenominatorRow(country=c, vaccine="MCV1", year=2010, target_population=n)
                                      for c, n in populations.items()])

    def test_population_weights(self):
        p = np.empty((4, 2, 1, 1))
        p[:, 0] = 0.5
        p[:, 1] = 1.0
        table = regional_aggregate(p, ["A", "B"], ["MCV1"], [2010], {"A": "AFR", "B": "AFR"},
                                   self._denominators({"A": 60.0, "B": 40.0}))
        assert table.rows[0].region == "AFR"
        assert table.rows[0].mean_pct == pytest.approx(70.0, abs=1e-12)

    def test_single_country_region(self):
        p = np.random.default_rng(0).uniform(size=(200, 2, 1, 1))
        table = regional_aggregate(p, ["A", "B"], ["MCV1"], [2010], {"A": "AFR", "B": "EUR"},
                                   self._denominators({"A": 60.0, "B": 40.0}))
        direct = summarize(p[:, :1], ["A"], ["MCV1"], [2010]).rows[0]
        afr = table.rows[0]
        assert (afr.mean_pct, afr.q025_pct, afr.q975_pct) == pytest.approx(
            (direct.mean_pct, direct.q025_pct, direct.q975_pct), abs=1e-9)

    def test_missing_denominator(self):
        p = np.full((2, 2, 1, 1), 0.5)
        with pytest.raises(MissingDenominatorError) as excinfo:
            regional_aggregate(p, ["A", "B"], ["MCV1"], [2010], {"A": "AFR", "B": "AFR"},
                               self._denominators({"A": 60.0}))
        assert excinfo.value.keys == [("B", "MCV1", 2010)]
        assert "B,MCV1,2010" in str(excinfo.value)

    def test_country_without_region(self):
        p = np.full((2, 3, 1, 1), 0.5)
        with pytest.raises(ModelDomainError) as excinfo:
            regional_aggregate(p, ["A", "B", "C"], ["MCV1"], [2010], {"A": "AFR"},
                               self._denominators({"A": 60.0, "B": 40.0, "C": 10.0}))
        assert "no region for countries: B, C" in str(excinfo.value)


class TestWaic:

    def test_identity(self):
        report = waic_from_pointwise(np.random.default_rng(1).normal(-1.0, 0.3, size=(40, 12)))
        assert report.waic == pytest.approx(report.gof + 2.0 * report.penalty, abs=1e-9)
        assert (report.n_draws, report.n_observations) == (40, 12)

    def test_matches_two_pass_oracle(self):
        log_lik = np.random.default_rng(2).normal(-2.0, 0.5, size=(50, 20))
        lppd = sum(math.log(sum(math.exp(v) for v in log_lik[:, n]) / 50) for n in range(20))
        penalty = 0.0
        for n in range(20):
            column = log_lik[:, n]
            mean = sum(column) / 50
            penalty += sum((v - mean) ** 2 for v in column) / 49
        report = waic_from_pointwise(log_lik)
        assert report.gof == pytest.approx(-2.0 * lppd, abs=1e-9)
        assert report.penalty == pytest.approx(penalty, abs=1e-9)

    def test_one_draw(self):
        with pytest.raises(InsufficientDrawsError) as excinfo:
            waic_from_pointwise(np.zeros((1, 5)))
        assert "at least 2 draws" in str(excinfo.value)

    def test_constant_draws_have_no_penalty(self):
        dims = ModelDims(C=1, V=1, T=1)
        data = ObservationData(dims=dims, k=[0], i=[0], j=[0], t=[0], y=[0.0])
        report = waic(_constant_draws(dims), data)
        assert report.penalty == pytest.approx(0.0, abs=1e-12)
        assert report.gof == pytest.approx(math.log(2.0 * math.pi), abs=1e-12)

    def test_bdsl_pointwise_uses_source_effect(self):
        dims = ModelDims(C=1, V=1, T=1)
        latent = LatentField.zeros(dims)
        latent.nu = np.array([0.0, 0.0, 1.0])
        data = ObservationData(dims=dims, k=[2], i=[0], j=[0], t=[0], y=[1.0])
        log_lik = pointwise_log_likelihood(_constant_draws(dims, model=ModelKind.BDSL, latent=latent), data)
        np.testing.assert_allclose(log_lik, -0.5 * math.log(2.0 * math.pi), atol=1e-12)


class TestValidationMetrics:

    @staticmethod
    def _table(values, width=1.0):
        return EstimateTable(rows=[
            EstimateRow(country="C01", vaccine="V1", year=year, mean_pct=v, q025_pct=v - width,
                        q50_pct=v, q975_pct=v + width)
            for year, v in enumerate(values, start=1)
        ])

    def test_perfect_prediction(self):
        truth = {("C01", "V1", 1): 60.0, ("C01", "V1", 2): 70.0, ("C01", "V1", 3): 90.0}
        metrics = validation_metrics(self._table([60.0, 70.0, 90.0]), truth)
        assert (metrics.av_bias, metrics.rmse, metrics.mae) == (0.0, 0.0, 0.0)
        assert metrics.coverage95 == 100.0
        assert metrics.correlation == pytest.approx(1.0)
        assert metrics.n == 3

    def test_offset_prediction(self):
        truth = {("C01", "V1", 1): 60.0, ("C01", "V1", 2): 70.0}
        metrics = validation_metrics(self._table([62.0, 66.0], width=2.5), truth)
        assert metrics.av_bias == pytest.approx(-1.0)
        assert metrics.rmse == pytest.approx(math.sqrt(10.0))
        assert metrics.mae == pytest.approx(3.0)
        assert metrics.coverage95 == 50.0

    def test_only_shared_keys(self):
        truth = {("C01", "V1", 2): 70.0, ("C01", "V1", 9): 10.0}
        assert validation_metrics(self._table([60.0, 70.0]), truth).n == 1

    def test_no_shared_keys(self):
        with pytest.raises(InsufficientDrawsError):
            validation_metrics(self._table([60.0]), {("C02", "V1", 1): 60.0})


@pytest.mark.slow
class TestForecastIntervals:

    def test_forecast_wider_than_last_fitted_year(self):
        scenario = ScenarioSpec.numbered(1).model_copy(
            update={"missing_rates": (0.0, 0.0, 0.0), "late_starts": (1,), "n_late_vaccines": 0})
        synthetic = generate_synthetic(ModelDims(C=3, V=2, T=5), scenario, seed=6)
        draws, _ = run_chains(synthetic.data, ModelKind.IDML, PriorConfig.unrestricted(),
                              ChainConfig(n_chains=2, iterations=300, warmup=150, seed=5))
        countries, vaccines, years = synthetic.countries, synthetic.vaccines, synthetic.years
        fitted = {(r.country, r.vaccine): r for r in coverage_estimates(draws, countries, vaccines, years).rows
                  if r.year == years[-1]}
        forecast = predict_forward(draws, countries, vaccines, years, steps=1, seed=2)
        assert len(forecast) == len(fitted)
        for row in forecast.rows:
            last = fitted[(row.country, row.vaccine)]
            assert row.q975_pct - row.q025_pct >= last.q975_pct - last.q025_pct
