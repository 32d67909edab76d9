"""Synthetic ad-matching benchmark with known interventions.

Generating equations, per category c and day t::

    gamma_c   ~ Beta(0.5, 0.5)                (once per category)
    qv[c, t]  ~ Normal(qv_scale * gamma_c, qv_std)
    ad[c, t]  ~ Normal(ad_mean, ad_std)
    den[c, t] = kappa * ad / qv + beta * a_t * den[c, t-1] + Normal(0, sigma^2)
    y[t]      = sum_c den * qv / sum_c qv

with ``a_t = +1`` when ``floor(t / 7)`` is even and ``-1`` otherwise, and
``den[c, -1] = 0``. Volumes are truncated below at ``floor``.
"""

from __future__ import annotations

import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any

import numpy as np

from cfattrib import rng as rngmod
from cfattrib.attribution import (
    CF_SHAPLEY_EXACT,
    CF_SHAPLEY_MC,
    DELTA_METHODS,
    DO_SHAPLEY,
    SHAPLEY_DIRECT,
    cf_shapley_exact,
    cf_shapley_mc,
    delta_baselines,
    do_shapley,
    fit_direct_model,
    rollup_by_category,
    shapley_direct,
)
from cfattrib.counterfactual import CounterfactualSession
from cfattrib.errors import DegenerateSelection
from cfattrib.graph import ad_matching_graph, ad_node, den_node, input_roles, qv_node
from cfattrib.models import (
    FeatureLayout,
    FittedNodeModel,
    FittedSCM,
    LinearRegressor,
    SCMConfig,
    biweekly_sign,
    fit_scm,
)
from cfattrib.panel import PanelDataset

CONFIG1 = "config1_ad_demand"
CONFIG2 = "config2_query_volume"
CONFIGS = (CONFIG1, CONFIG2)
CF_SHAPLEY_TRUE_SCM = "cf_shapley_true_scm"
DEFAULT_METHODS = (CF_SHAPLEY_MC, SHAPLEY_DIRECT, DO_SHAPLEY) + DELTA_METHODS
BURN_IN = 28


@dataclass(frozen=True)
class SimulationConfig:
    k: int = 10
    T: int = 1000
    kappa: float = 0.85
    beta: float = 0.15
    sigma: float = 1.0
    seed: int = 0
    qv_scale: float = 1000.0
    qv_std: float = 100.0
    ad_mean: float = 10000.0
    ad_std: float = 100.0
    floor: float = 1.0
    sign_period: int = 7

    def __post_init__(self) -> None:
        if self.kappa < 0 or self.beta < 0:
            raise ValueError("kappa and beta must be non-negative")
        if self.T <= BURN_IN:
            raise ValueError(f"T must exceed {BURN_IN} days")
        if self.k < 2:
            raise ValueError("need at least two categories")
        if self.sigma < 0 or self.qv_std < 0 or self.ad_std < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.floor <= 0:
            raise ValueError("volume floor must be positive")

    @property
    def categories(self) -> tuple[str, ...]:
        return tuple(f"c{i}" for i in range(self.k))


@dataclass(frozen=True)
class InterventionRecord:
    config: str
    target_day: int
    t_ref: int
    factors: tuple[float, float]
    first: str
    second: str

    @property
    def ground_truth(self) -> str:
        return self.first


@dataclass(frozen=True, eq=False)
class SimulatedData:
    panel: PanelDataset
    config: SimulationConfig
    gamma: np.ndarray
    noise: np.ndarray
    sign: np.ndarray
    truncations: int
    intervention: InterventionRecord | None = None


def _density(cfg: SimulationConfig, ad, qv, prev, sign, noise):
    return cfg.kappa * ad / qv + cfg.beta * sign * prev + noise


def simulate(config: SimulationConfig) -> SimulatedData:
    """Draw one panel; every random quantity has its own named stream."""
    k, T = config.k, config.T
    gamma = rngmod.stream(config.seed, "sim.gamma").beta(0.5, 0.5, size=k)
    qv = config.qv_scale * gamma[:, None] + config.qv_std * rngmod.stream(config.seed, "sim.qv").standard_normal((k, T))
    ad = config.ad_mean + config.ad_std * rngmod.stream(config.seed, "sim.ad").standard_normal((k, T))
    noise = config.sigma * rngmod.stream(config.seed, "sim.noise").standard_normal((k, T))
    truncations = int((qv < config.floor).sum() + (ad < config.floor).sum())
    qv = np.maximum(qv, config.floor)
    ad = np.maximum(ad, config.floor)
    sign = biweekly_sign(np.arange(T), config.sign_period)
    den = np.empty((k, T))
    prev = np.zeros(k)
    for t in range(T):
        prev = den[:, t] = _density(config, ad[:, t], qv[:, t], prev, sign[t], noise[:, t])
    panel = PanelDataset(config.categories, qv=qv, ad=ad, den=den)
    return SimulatedData(panel, config, gamma, noise, sign, truncations)


def generate_dataset(config: SimulationConfig, seed: int | None = None) -> PanelDataset:
    if seed is not None:
        config = replace(config, seed=seed)
    return simulate(config).panel


def select_categories(sim: SimulatedData, config: str, target_day: int, reference_lag: int = 14) -> tuple[int, int]:
    """Indices of the (first, second) categories an intervention scales."""
    panel = sim.panel
    if config == CONFIG1:
        mean_qv = panel.qv[:, BURN_IN:target_day].mean(axis=1)
        first, second = int(np.argmax(mean_qv)), int(np.argmin(mean_qv))
    elif config == CONFIG2:
        t_ref = target_day - reference_lag
        gap = np.abs(panel.den[:, t_ref] - panel.y[t_ref])
        first, second = int(np.argmax(gap)), int(np.argmin(gap))
    else:
        raise ValueError(f"unknown intervention config {config!r}")
    if first == second:
        raise DegenerateSelection(f"{config} picked category {panel.categories[first]!r} twice")
    return first, second


@dataclass(frozen=True)
class InterventionSpec:
    config: str = CONFIG1
    target_day: int | None = None
    factors: tuple[float, float] = (2.0, 2.1)
    reference_lag: int = 14


def apply_intervention(sim: SimulatedData, spec: InterventionSpec) -> tuple[SimulatedData, str]:
    """Scale one input of two categories on the target day and regenerate that day.

    The day's noise realization is reused, so only the inputs differ from the
    unintervened draw. Returns the new data and the ground-truth category.
    """
    cfg = sim.config
    target = cfg.T - 1 if spec.target_day is None else spec.target_day
    if not BURN_IN < target < cfg.T:
        raise ValueError(f"target day {target} outside ({BURN_IN}, {cfg.T})")
    first, second = select_categories(sim, spec.config, target, spec.reference_lag)
    panel = sim.panel
    ad, qv, den = panel.ad.copy(), panel.qv.copy(), panel.den.copy()
    scaled = ad if spec.config == CONFIG1 else qv
    scaled[first, target] *= spec.factors[0]
    scaled[second, target] *= spec.factors[1]
    prev = den[:, target - 1] if target > 0 else np.zeros(cfg.k)
    den[:, target] = _density(cfg, ad[:, target], qv[:, target], prev, sim.sign[target], sim.noise[:, target])
    record = InterventionRecord(
        config=spec.config,
        target_day=target,
        t_ref=target - spec.reference_lag,
        factors=tuple(spec.factors),
        first=panel.categories[first],
        second=panel.categories[second],
    )
    new = replace(sim, panel=PanelDataset(panel.categories, qv=qv, ad=ad, den=den), intervention=record)
    return new, record.ground_truth


def exact_form_features(categories: Sequence[str], sign_period: int = 7) -> dict[str, dict[str, Any]]:
    """Engineered columns that make a linear density model match the generator."""
    return {
        den_node(c): {"ratios": ((ad_node(c), qv_node(c)),), "signed_lags": (1,), "sign_period": sign_period}
        for c in categories
    }


def true_scm(sim: SimulatedData) -> FittedSCM:
    """The generating equations packaged as a fitted SCM (a diagnostic oracle)."""
    cfg = sim.config
    graph = ad_matching_graph(cfg.categories, lags=(1,))
    models = {}
    for c in cfg.categories:
        node = den_node(c)
        layout = FeatureLayout(
            node=node,
            parents=(ad_node(c), qv_node(c)),
            ratios=((ad_node(c), qv_node(c)),),
            signed_lags=(1,),
            sign_period=cfg.sign_period,
        )
        reg = LinearRegressor(ridge=0.0)
        reg.coef_ = np.array([0.0, 0.0, cfg.kappa, cfg.beta])
        reg.intercept_ = 0.0
        models[node] = FittedNodeModel(node, layout, reg, cfg.sigma, (1, cfg.T), np.zeros(0))
    return FittedSCM(graph, MappingProxyType(models), SCMConfig(clamp_at_zero=False))


@dataclass(frozen=True)
class ExperimentSettings:
    k: int = 10
    T: int = 1000
    M: int = 1000
    lags: tuple[int, ...] = (1, 7, 14)
    regressor: str = "linear"
    regressor_params: Mapping[str, Any] = field(default_factory=dict)
    exact_form: bool = False
    direct_regressor: str = "linear"
    n_samples: int = 100
    reference_lag: int = 14
    relative_deltas: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "regressor_params", MappingProxyType(dict(self.regressor_params)))


@dataclass(frozen=True)
class TrialOutcome:
    method: str
    config: str
    sigma: float
    seed: int
    top: str
    ground_truth: str
    tie: bool

    @property
    def correct(self) -> bool:
        return self.top == self.ground_truth


def _top(totals: Mapping[str, float]) -> tuple[str, bool]:
    names = list(totals)
    best = max(totals.values())
    winners = [c for c in names if totals[c] == best]
    return winners[0], len(winners) > 1


def run_trial(
    config: str, sigma: float, seed: int, methods: Sequence[str], settings: ExperimentSettings | None = None
) -> list[TrialOutcome]:
    """One simulate -> intervene -> fit -> attribute round for every method."""
    s = settings or ExperimentSettings()
    sim = simulate(SimulationConfig(k=s.k, T=s.T, sigma=sigma, seed=seed))
    sim, truth = apply_intervention(sim, InterventionSpec(config=config, reference_lag=s.reference_lag))
    panel = sim.panel
    t, t_ref = sim.intervention.target_day, sim.intervention.t_ref
    categories = panel.categories
    roles = input_roles(categories)
    tops: dict[str, Mapping[str, float]] = {}

    cf_methods = [m for m in methods if m in (CF_SHAPLEY_MC, CF_SHAPLEY_EXACT)]
    if cf_methods:
        graph = ad_matching_graph(categories, lags=s.lags)
        scm = fit_scm(
            graph,
            panel,
            SCMConfig(
                regressor=s.regressor,
                regressor_params=s.regressor_params,
                train_range=(BURN_IN, t),
                engineered=exact_form_features(categories) if s.exact_form else {},
            ),
        )
        session = CounterfactualSession(scm, panel, t, t_ref)
        for m in cf_methods:
            result = cf_shapley_mc(session, M=s.M, seed=seed) if m == CF_SHAPLEY_MC else cf_shapley_exact(session)
            tops[m] = rollup_by_category(result, roles).totals()
    if CF_SHAPLEY_TRUE_SCM in methods:
        session = CounterfactualSession(true_scm(sim), panel, t, t_ref)
        tops[CF_SHAPLEY_TRUE_SCM] = rollup_by_category(cf_shapley_mc(session, M=s.M, seed=seed), roles).totals()
    if SHAPLEY_DIRECT in methods or DO_SHAPLEY in methods:
        direct = fit_direct_model(panel, (BURN_IN, t), s.direct_regressor)
        x, r = panel.inputs_at(t), panel.inputs_at(t_ref)
        if SHAPLEY_DIRECT in methods:
            tops[SHAPLEY_DIRECT] = rollup_by_category(shapley_direct(direct, x, r, M=s.M, seed=seed), roles).totals()
        if DO_SHAPLEY in methods:
            result = do_shapley(direct, x, M=s.M, seed=seed, n_samples=s.n_samples)
            tops[DO_SHAPLEY] = rollup_by_category(result, roles).totals()
    if any(m in DELTA_METHODS for m in methods):
        deltas = delta_baselines(panel, t, t_ref, relative=s.relative_deltas)
        for m in DELTA_METHODS:
            if m in methods:
                tops[m] = deltas[m].scores

    outcomes = []
    for m in methods:
        top, tie = _top(tops[m])
        outcomes.append(TrialOutcome(m, config, float(sigma), seed, top, truth, tie))
    return outcomes


def wilson_interval(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    from statsmodels.stats.proportion import proportion_confint

    low, high = proportion_confint(successes, trials, alpha=1 - level, method="wilson")
    return float(low), float(high)


@dataclass(frozen=True)
class AccuracyRow:
    method: str
    config: str
    sigma: float
    correct: int
    trials: int
    ties: int
    ci_low: float
    ci_high: float

    @property
    def accuracy(self) -> float:
        return self.correct / self.trials

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2


def worker_count() -> int:
    """Worker cap from CFATTRIB_THREADS (0 or unset means one per CPU)."""
    raw = os.environ.get("CFATTRIB_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("CFATTRIB_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def run_accuracy_experiment(
    methods: Sequence[str] = DEFAULT_METHODS,
    sigmas: Sequence[float] = (0.1, 1.0, 10.0),
    trials: int = 20,
    seed: int = 0,
    configs: Sequence[str] = CONFIGS,
    settings: ExperimentSettings | None = None,
    n_jobs: int | None = None,
) -> tuple[list[AccuracyRow], list[TrialOutcome]]:
    """Top-category accuracy per (method, config, sigma); trial i uses seed + i."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    jobs = [(cfg, float(sig), seed + i) for cfg in configs for sig in sigmas for i in range(trials)]
    n_jobs = worker_count() if n_jobs is None else n_jobs
    if n_jobs == 1 or len(jobs) == 1:
        per_job = [run_trial(cfg, sig, sd, methods, settings) for cfg, sig, sd in jobs]
    else:
        from joblib import Parallel, delayed

        per_job = Parallel(n_jobs=min(n_jobs, len(jobs)))(
            delayed(run_trial)(cfg, sig, sd, methods, settings) for cfg, sig, sd in jobs
        )
    outcomes = [o for group in per_job for o in group]
    rows = []
    for m in methods:
        for cfg in configs:
            for sig in sigmas:
                sel = [o for o in outcomes if o.method == m and o.config == cfg and o.sigma == float(sig)]
                correct = sum(o.correct for o in sel)
                low, high = wilson_interval(correct, len(sel))
                rows.append(AccuracyRow(m, cfg, float(sig), correct, len(sel), sum(o.tie for o in sel), low, high))
    return rows, outcomes
