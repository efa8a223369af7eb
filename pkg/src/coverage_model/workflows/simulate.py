# src/coverage_model/workflows/simulate.py
"""
Synthetic multi-source coverage data and the BDSL-vs-IDML validation experiment.

Start times in ScenarioSpec are 1-based; every array here is 0-based.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Literal, Optional, Tuple

import numpy as np
from scipy.special import expit

from ..core.errors import InsufficientDrawsError, ModelDomainError
from ..core.model import N_SOURCES, ModelDims, ModelKind, ObservationData
from ..core.posterior import coverage_estimates, predict_forward, validation_metrics
from ..core.sampler import run_chains
from ..models.configs import ChainConfig, PriorConfig, ScenarioSpec
from ..models.reports import EstimateTable, ExperimentCell, ExperimentReport

logger = logging.getLogger(__name__)

FULL_DIMS = ModelDims(C=20, V=5, T=20)
FULL_BASE_YEARS = 10
DESK_DIMS = ModelDims(C=8, V=3, T=12)
DESK_CHAIN = ChainConfig(n_chains=4, iterations=1000, warmup=500)

ExperimentMode = Literal["rolling", "extrapolate"]
TruthKey = Tuple[str, str, int]


@dataclass
class SyntheticData:
    """One generated dataset with the quantities it was generated from."""
    model: ModelKind
    data: ObservationData
    mu: np.ndarray       # (C, V, T) shared mean without intercepts
    truth: np.ndarray    # (C, V, T) true coverage proportions for `model`
    starts: np.ndarray   # (C, V) first time index of each series

    @property
    def dims(self) -> ModelDims:
        return self.data.dims

    @property
    def countries(self) -> List[str]:
        return [f"C{i + 1:02d}" for i in range(self.dims.C)]

    @property
    def vaccines(self) -> List[str]:
        return [f"V{j + 1}" for j in range(self.dims.V)]

    @property
    def years(self) -> List[int]:
        """Time labels 1..T."""
        return list(range(1, self.dims.T + 1))

    def truth_pct(self, times: Iterable[int]) -> Dict[TruthKey, float]:
        """True coverage in percent at the given time indices, only where a series has started."""
        countries, vaccines = self.countries, self.vaccines
        out: Dict[TruthKey, float] = {}
        for t in times:
            for i in range(self.dims.C):
                for j in range(self.dims.V):
                    if t >= self.starts[i, j]:
                        out[(countries[i], vaccines[j], t + 1)] = 100.0 * float(self.truth[i, j, t])
        return out

    def window(self, n_times: int) -> ObservationData:
        """The observations of the first `n_times` time points."""
        if not 1 <= n_times <= self.dims.T:
            raise ValueError(f"window must cover 1..{self.dims.T} time points, got {n_times}")
        keep = self.data.t < n_times
        d = self.data
        return ObservationData(dims=ModelDims(self.dims.C, self.dims.V, n_times),
                               k=d.k[keep], i=d.i[keep], j=d.j[keep], t=d.t[keep], y=d.y[keep])


def _ar1_rows(rng: np.random.Generator, n_rows: int, T: int, rho: float, variance: float) -> np.ndarray:
    """Stationary AR(1) rows: x_1 ~ N(0, s^2 / (1 - rho^2)), x_t = rho x_{t-1} + N(0, s^2)."""
    sigma = np.sqrt(variance)
    rows = np.empty((n_rows, T))
    rows[:, 0] = rng.normal(0.0, sigma / np.sqrt(1.0 - rho * rho), size=n_rows)
    for t in range(1, T):
        rows[:, t] = rho * rows[:, t - 1] + rng.normal(0.0, sigma, size=n_rows)
    return rows


def draw_shared_mean(dims: ModelDims, scenario: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    """One realization of every random effect at the scenario's true values, summed into mu."""
    C, V, T = dims.C, dims.V, dims.T
    s = scenario
    beta = rng.normal(0.0, np.sqrt(s.sigma2_beta), size=C)
    alpha = rng.normal(0.0, np.sqrt(s.sigma2_alpha), size=V)
    psi = rng.normal(0.0, np.sqrt(s.sigma2_psi), size=(C, V))
    gamma = _ar1_rows(rng, 1, T, s.rho_gamma, s.sigma2_gamma)[0]
    phi = _ar1_rows(rng, C, T, s.rho_phi, s.sigma2_phi)
    delta = _ar1_rows(rng, V, T, s.rho_delta, s.sigma2_delta)
    omega = _ar1_rows(rng, C * V, T, s.rho_omega, s.sigma2_omega).reshape(C, V, T)
    return (beta[:, None, None] + alpha[None, :, None] + gamma[None, None, :] + phi[:, None, :]
            + delta[None, :, :] + psi[:, :, None] + omega)


def _series_starts(dims: ModelDims, scenario: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    starts = np.zeros((dims.C, dims.V), dtype=np.int64)
    n_late = min(scenario.n_late_vaccines, dims.V)
    if n_late:
        options = np.asarray(scenario.late_starts, dtype=np.int64) - 1
        starts[:, dims.V - n_late:] = rng.choice(options, size=(dims.C, n_late))
    return starts


def generate_synthetic(
    dims: ModelDims = FULL_DIMS,
    scenario: Optional[ScenarioSpec] = None,
    seed: int = 0,
    model: ModelKind = ModelKind.IDML,
) -> SyntheticData:
    """
    Generates admin, official and survey series for one model.

    The random effects, series start points and deleted cells depend only on
    (dims, scenario, seed), so both models see the same realization and the
    same observation pattern; only the source terms differ:

    - IDML: y^(k) = lambda^(k) + mu + N(0, sigma_k^2); truth = invlogit(mu)
    - BDSL: y^(k) = lambda + mu + nu^(k) + N(0, sigma^2); truth = invlogit(lambda + mu)

    Raises:
        ModelDomainError: If a late start lies beyond the last time point.
    """
    scenario = scenario or ScenarioSpec.numbered(1)
    model = ModelKind(model)
    if scenario.n_late_vaccines and max(scenario.late_starts) > dims.T:
        raise ModelDomainError(f"late start {max(scenario.late_starts)} is beyond T={dims.T}")
    effects_rng, layout_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))

    mu = draw_shared_mean(dims, scenario, effects_rng)
    starts = _series_starts(dims, scenario, layout_rng)

    C, V, T = dims.C, dims.V, dims.T
    k, i, j, t = (axis.ravel() for axis in np.indices((N_SOURCES, C, V, T)))
    present = t >= starts[i, j]
    for source, rate in enumerate(scenario.missing_rates):
        candidates = np.flatnonzero(present & (k == source))
        n_delete = int(round(rate * candidates.size))
        if n_delete:
            present[layout_rng.choice(candidates, size=n_delete, replace=False)] = False
    k, i, j, t = k[present], i[present], j[present], t[present]

    if model == ModelKind.IDML:
        intercept = np.asarray(scenario.lambda_src)[k]
        noise = np.sqrt(np.asarray(scenario.source_var))[k] * noise_rng.standard_normal(k.size)
        truth = expit(mu)
    else:
        nu = noise_rng.normal(0.0, np.sqrt(scenario.sigma2_nu), size=N_SOURCES)
        intercept = scenario.lambda_bdsl + nu[k]
        noise = np.sqrt(scenario.sigma2_bdsl) * noise_rng.standard_normal(k.size)
        truth = expit(mu + scenario.lambda_bdsl)
    y = intercept + mu[i, j, t] + noise

    data = ObservationData(dims=dims, k=k, i=i, j=j, t=t, y=y)
    logger.info(f"Generated {len(data)} {model.value.upper()} observations for '{scenario.name}' "
                f"(C={C} V={V} T={T}, seed {seed}, per source {data.counts().tolist()})")
    return SyntheticData(model=model, data=data, mu=mu, truth=truth, starts=starts)


def desk_scenario(scenario: ScenarioSpec, dims: ModelDims = DESK_DIMS) -> Tuple[ScenarioSpec, int]:
    """
    Rescales a full-size scenario to smaller dims.

    Late starts and the number of base years are scaled by T / 20, and the
    number of late vaccines is capped so at least one vaccine starts at t=1.

    Returns:
        (rescaled scenario, base years)
    """
    factor = dims.T / FULL_DIMS.T
    starts = tuple(sorted({max(1, int(round(s * factor))) for s in scenario.late_starts}))
    base_years = max(2, int(round(FULL_BASE_YEARS * factor)))
    n_late = min(scenario.n_late_vaccines, max(dims.V - 1, 0))
    return scenario.model_copy(update={"late_starts": starts, "n_late_vaccines": n_late}), base_years


@dataclass
class _Forecast:
    origin: int
    steps: Dict[int, EstimateTable]
    rhat_passed: bool


class SimulationExperiment:
    """
    Fits both models to their own synthetic data and scores the estimates against truth.

    Args:
        scenario: Data-generating scenario.
        dims: Problem size.
        config: Chain settings for every fit.
        base_years: Time points in the first forecasting window.
        seed: Generator seed; fits use config.seed.
        mode: "rolling" refits at every origin base_years..T-1 and pools the
            one- and two-step-ahead errors; "extrapolate" fits once on the
            base years and forecasts every remaining year.
        priors: Priors for both models; the experiment default is the
            unrestricted set (Half-Cauchy(0, 2) on every source scale).
        n_jobs: Fits run concurrently in a thread pool of this size.
    """

    def __init__(self, scenario: ScenarioSpec, dims: ModelDims, config: ChainConfig, base_years: int,
                 seed: int = 0, mode: ExperimentMode = "rolling", priors: Optional[PriorConfig] = None,
                 n_jobs: int = 1):
        if not 1 <= base_years < dims.T:
            raise ValueError(f"base_years must lie in 1..{dims.T - 1}, got {base_years}")
        if mode not in ("rolling", "extrapolate"):
            raise ValueError(f"unknown experiment mode '{mode}'")
        self.scenario = scenario
        self.dims = dims
        self.config = config
        self.base_years = base_years
        self.seed = seed
        self.mode = mode
        self.priors = priors or PriorConfig.unrestricted()
        self.n_jobs = max(1, n_jobs)
        self.annotations: List[str] = []

    def _in_sample(self, synthetic: SyntheticData) -> Tuple[EstimateTable, bool]:
        draws, report = run_chains(synthetic.data, synthetic.model, self.priors, self.config)
        estimates = coverage_estimates(draws, synthetic.countries, synthetic.vaccines, synthetic.years)
        return estimates, report.passed

    def _forecast(self, synthetic: SyntheticData, origin: int, steps: int) -> _Forecast:
        draws, report = run_chains(synthetic.window(origin), synthetic.model, self.priors, self.config)
        table = predict_forward(draws, synthetic.countries, synthetic.vaccines, synthetic.years[:origin],
                                steps, seed=self.config.seed + origin)
        by_step = {s: EstimateTable(rows=[r for r in table.rows if r.year == origin + s]) for s in range(1, steps + 1)}
        return _Forecast(origin=origin, steps=by_step, rhat_passed=report.passed)

    def _origins(self) -> List[Tuple[int, int]]:
        T = self.dims.T
        if self.mode == "extrapolate":
            return [(self.base_years, T - self.base_years)]
        return [(origin, min(2, T - origin)) for origin in range(self.base_years, T)]

    def _score(self, cells: List[ExperimentCell], model: ModelKind, horizon: str, estimates: EstimateTable,
               truth: Dict[TruthKey, float], rhat_passed: bool) -> None:
        try:
            metrics = validation_metrics(estimates, truth)
        except InsufficientDrawsError:
            self.annotations.append(f"{model.value.upper()} {horizon}: no scored cells")
            return
        cells.append(ExperimentCell(model=model.value, horizon=horizon, metrics=metrics, rhat_passed=rhat_passed))
        if not rhat_passed:
            self.annotations.append(f"{model.value.upper()} {horizon}: R-hat gate failed")

    def run_model(self, model: ModelKind) -> List[ExperimentCell]:
        synthetic = generate_synthetic(self.dims, self.scenario, self.seed, model)
        origins = self._origins()
        with ThreadPoolExecutor(max_workers=self.n_jobs, thread_name_prefix="fit") as pool:
            in_sample = pool.submit(self._in_sample, synthetic)
            forecasts = [pool.submit(self._forecast, synthetic, origin, steps) for origin, steps in origins]
            estimates, passed = in_sample.result()
            results = [future.result() for future in forecasts]

        cells: List[ExperimentCell] = []
        self._score(cells, model, "in-sample", estimates, synthetic.truth_pct(range(self.dims.T)), passed)
        horizons = [step for step in (1, 2) if any(step in result.steps for result in results)]
        for step in horizons:
            rows, truth = [], {}
            for result in results:
                if step in result.steps:
                    rows.extend(result.steps[step].rows)
                    truth.update(synthetic.truth_pct([result.origin + step - 1]))
            self._score(cells, model, f"{step}-step", EstimateTable(rows=rows), truth,
                        all(r.rhat_passed for r in results if step in r.steps))
        if self.mode == "extrapolate":
            all_rows = [row for result in results for table in result.steps.values() for row in table.rows]
            truth = synthetic.truth_pct(range(self.base_years, self.dims.T))
            self._score(cells, model, "all steps", EstimateTable(rows=all_rows), truth,
                        all(r.rhat_passed for r in results))
        return cells

    def run(self) -> ExperimentReport:
        logger.info(f"Experiment '{self.scenario.name}': {self.mode} mode, base years {self.base_years}, "
                    f"C={self.dims.C} V={self.dims.V} T={self.dims.T}, seed {self.seed}")
        self.annotations = []
        cells: List[ExperimentCell] = []
        for model in (ModelKind.BDSL, ModelKind.IDML):
            cells.extend(self.run_model(model))
        report = ExperimentReport(
            scenario=self.scenario.name, mode=self.mode, seed=self.seed,
            dims=(self.dims.C, self.dims.V, self.dims.T), base_years=self.base_years,
            cells=cells, annotations=list(self.annotations),
        )
        for note in report.annotations:
            logger.warning(f"Experiment '{self.scenario.name}': {note}")
        return report


def run_experiment(
    scenario: ScenarioSpec,
    dims: ModelDims = FULL_DIMS,
    config: Optional[ChainConfig] = None,
    base_years: int = FULL_BASE_YEARS,
    seed: int = 0,
    mode: ExperimentMode = "rolling",
    priors: Optional[PriorConfig] = None,
    n_jobs: int = 1,
) -> ExperimentReport:
    """Runs SimulationExperiment and returns its report (see that class for the arguments)."""
    experiment = SimulationExperiment(scenario, dims, config or ChainConfig(), base_years, seed=seed, mode=mode,
                                      priors=priors, n_jobs=n_jobs)
    return experiment.run()
