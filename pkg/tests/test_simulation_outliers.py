from dataclasses import replace

import numpy as np
import pytest

from cfattrib.attribution import (
    CF_SHAPLEY_EXACT,
    CF_SHAPLEY_MC,
    cf_shapley_exact,
    rollup_by_category,
)
from cfattrib.counterfactual import CounterfactualSession
from cfattrib.errors import InsufficientData, InsufficientHistory
from cfattrib.graph import ad_matching_graph, input_roles
from cfattrib.models import SCMConfig, biweekly_sign, fit_scm
from cfattrib.outliers import (
    DailyModel,
    compare_daily_models,
    detect_outliers,
    fit_daily_model,
    z_value,
)
from cfattrib.panel import PanelDataset, aggregate_daily_density
from cfattrib.simulation import (
    CONFIG1,
    CONFIG2,
    InterventionSpec,
    SimulationConfig,
    apply_intervention,
    exact_form_features,
    generate_dataset,
    run_accuracy_experiment,
    run_trial,
    select_categories,
    simulate,
    true_scm,
    wilson_interval,
    worker_count,
)

# ---- generator -----------------------------------------------------------


def test_sign_sequence():
    signs = biweekly_sign(np.arange(15))
    assert "".join("+" if s > 0 else "-" for s in signs) == "+++++++-------+"


def test_closed_form_without_noise_or_memory():
    sim = simulate(SimulationConfig(k=4, T=60, sigma=0.0, beta=0.0, seed=3))
    p = sim.panel
    np.testing.assert_array_equal(p.den, 0.85 * p.ad / p.qv)


def test_ad_demand_law_of_large_numbers():
    p = generate_dataset(SimulationConfig(k=10, T=1000, seed=11))
    assert abs(p.ad.mean() - 10000) < 4 * 100 / np.sqrt(p.ad.size)


def test_aggregation_identity_and_recursion():
    sim = simulate(SimulationConfig(k=5, T=200, sigma=1.0, seed=1))
    p = sim.panel
    for t in range(0, 200, 13):
        assert p.y[t] == pytest.approx(aggregate_daily_density(p.den[:, t], p.qv[:, t]), abs=1e-9)
    t = 50
    expected = 0.85 * p.ad[:, t] / p.qv[:, t] + 0.15 * sim.sign[t] * p.den[:, t - 1] + sim.noise[:, t]
    np.testing.assert_allclose(p.den[:, t], expected, rtol=1e-12)
    assert np.all(p.qv >= 1.0) and np.all(p.ad >= 1.0)


def test_determinism_and_seed_sensitivity():
    a = generate_dataset(SimulationConfig(k=3, T=100), seed=4)
    b = generate_dataset(SimulationConfig(k=3, T=100), seed=4)
    c = generate_dataset(SimulationConfig(k=3, T=100), seed=5)
    np.testing.assert_array_equal(a.den, b.den)
    assert not np.array_equal(a.den, c.den)


def test_config_validation():
    for bad in ({"kappa": -1}, {"T": 28}, {"k": 1}, {"sigma": -1}):
        with pytest.raises(ValueError):
            SimulationConfig(**bad)


# ---- interventions -------------------------------------------------------


@pytest.mark.parametrize("config", [CONFIG1, CONFIG2])
def test_intervention_locality(config):
    sim = simulate(SimulationConfig(k=6, T=120, seed=2))
    new, truth = apply_intervention(sim, InterventionSpec(config=config))
    rec = new.intervention
    assert truth == rec.first != rec.second
    before, after = sim.panel, new.panel
    for name in ("qv", "ad", "den"):
        np.testing.assert_array_equal(getattr(before, name)[:, :-1], getattr(after, name)[:, :-1])
    i, j = before.categories.index(rec.first), before.categories.index(rec.second)
    scaled, fixed = ("ad", "qv") if config == CONFIG1 else ("qv", "ad")
    np.testing.assert_array_equal(getattr(after, fixed), getattr(before, fixed))
    assert getattr(after, scaled)[i, -1] == 2.0 * getattr(before, scaled)[i, -1]
    assert getattr(after, scaled)[j, -1] == 2.1 * getattr(before, scaled)[j, -1]


def test_identity_factors_change_nothing():
    sim = simulate(SimulationConfig(k=4, T=80, seed=9))
    new, _ = apply_intervention(sim, InterventionSpec(config=CONFIG1, factors=(1.0, 1.0)))
    np.testing.assert_array_equal(new.panel.den, sim.panel.den)


def test_selection_rules():
    sim = simulate(SimulationConfig(k=5, T=100, seed=0))
    first, second = select_categories(sim, CONFIG1, 99)
    mean_qv = sim.panel.qv[:, 28:99].mean(axis=1)
    assert first == int(np.argmax(mean_qv)) and second == int(np.argmin(mean_qv))
    first, second = select_categories(sim, CONFIG2, 99)
    gap = np.abs(sim.panel.den[:, 85] - sim.panel.y[85])
    assert first == int(np.argmax(gap)) and second == int(np.argmin(gap))
    with pytest.raises(ValueError):
        select_categories(sim, "config3", 99)


def test_true_scm_abduces_the_noise():
    sim = simulate(SimulationConfig(k=4, T=100, sigma=0.5, seed=6))
    s = CounterfactualSession(true_scm(sim), sim.panel, 90, 76)
    for i, c in enumerate(sim.panel.categories):
        assert s.abduction.residuals[f"den[{c}]"] == pytest.approx(sim.noise[i, 90], abs=1e-9)


def test_exact_form_models_have_zero_efficiency_residual():
    sim = simulate(SimulationConfig(k=3, T=300, sigma=0.0, seed=8))
    sim, _ = apply_intervention(sim, InterventionSpec(config=CONFIG1))
    p = sim.panel
    scm = fit_scm(
        ad_matching_graph(p.categories, lags=(1,)),
        p,
        SCMConfig(train_range=(28, 299), engineered=exact_form_features(p.categories)),
    )
    res = cf_shapley_exact(CounterfactualSession(scm, p, 299, 285))
    assert abs(res.efficiency_residual) < 1e-6
    coefs = scm.models["den[c0]"].parameters()["coefficients"]
    assert coefs["ad[c0]/qv[c0]"] == pytest.approx(0.85, abs=1e-3)
    assert coefs["sign7*den[c0]@t-1"] == pytest.approx(0.15, abs=1e-3)


# ---- experiment harness --------------------------------------------------


def test_wilson_interval():
    low, high = wilson_interval(18, 20)
    assert low < 0.9 < high
    assert wilson_interval(0, 20)[0] == 0.0
    assert wilson_interval(20, 20)[1] == pytest.approx(1.0)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("CFATTRIB_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("CFATTRIB_THREADS", "0")
    assert worker_count() >= 1
    monkeypatch.setenv("CFATTRIB_THREADS", "-2")
    with pytest.raises(ValueError):
        worker_count()


def test_experiment_is_deterministic_and_schedule_free():
    from cfattrib.simulation import ExperimentSettings

    settings = ExperimentSettings(k=4, T=200, M=50)
    kw = dict(methods=(CF_SHAPLEY_MC, "qv_delta"), sigmas=(1.0,), trials=2, seed=3, settings=settings)
    rows_a, out_a = run_accuracy_experiment(n_jobs=1, **kw)
    rows_b, out_b = run_accuracy_experiment(n_jobs=2, **kw)
    assert rows_a == rows_b and out_a == out_b
    assert len(rows_a) == 2 * 2  # methods x configs
    assert all(r.trials == 2 for r in rows_a)
    with pytest.raises(ValueError):
        run_accuracy_experiment(trials=0)


def test_trial_reports_ground_truth():
    from cfattrib.simulation import ExperimentSettings

    out = run_trial(CONFIG1, 0.1, 0, [CF_SHAPLEY_EXACT], ExperimentSettings(k=3, T=150))
    assert out[0].ground_truth in ("c0", "c1", "c2")
    assert out[0].method == CF_SHAPLEY_EXACT


# ---- outlier detection ---------------------------------------------------


def flat_panel(T=120, value=2.0):
    ones = np.ones((2, T))
    return PanelDataset(("a", "b"), qv=ones, ad=ones, den=ones * value)


def test_constant_series_interval_collapses():
    p = flat_panel()
    model = fit_daily_model(p)
    assert model.residual_std == pytest.approx(2e-12)
    report = detect_outliers(model, p, range(100, 120))
    assert all(r.prediction == 2.0 and r.high - r.low < 1e-11 for r in report.rows)
    assert report.flagged_days == []


def test_noise_free_simulation_has_no_outliers():
    sim = simulate(SimulationConfig(k=5, T=300, sigma=0.0, qv_std=0.0, ad_std=0.0, seed=0))
    model = fit_daily_model(sim.panel, train_range=(28, 250))
    # the lag-14 fit is near exact once the recursion settles into its period
    assert model.residual_std < 1e-4 * np.abs(sim.panel.y).max()
    assert detect_outliers(model, sim.panel, range(250, 300)).flagged_days == []


def test_interval_edges_and_nesting():
    sim = simulate(SimulationConfig(k=5, T=400, sigma=1.0, seed=2))
    model = fit_daily_model(sim.panel, train_range=(28, 300))
    r95 = detect_outliers(model, sim.panel, range(300, 400), level=0.95)
    r99 = detect_outliers(model, sim.panel, range(300, 400), level=0.99)
    assert set(r99.flagged_days) <= set(r95.flagged_days)
    for r in r95.rows:
        assert r.low <= r.prediction <= r.high
        assert r.flagged == (not r.low <= r.observed <= r.high)
    assert z_value(0.95) == pytest.approx(1.959964, abs=1e-6)
    # an observation sitting exactly on the upper edge is not flagged
    y = sim.panel.y
    pred = model.predict_days(sim.panel, [350])[0]
    edge_model = DailyModel(model.layout, model.regressor, (y[350] - pred) / z_value(0.95), model.train_days, model.validation_days)
    row = detect_outliers(edge_model, sim.panel, [350]).rows[0]
    if row.high == row.observed:
        assert not row.flagged


def test_validation_tail_and_guards():
    p = flat_panel(T=200)
    model = fit_daily_model(p, train_range=(28, 128))
    assert model.train_days == (28, 108) and model.validation_days == (108, 128)
    with pytest.raises(InsufficientData):
        fit_daily_model(flat_panel(T=80))
    with pytest.raises(InsufficientHistory):
        detect_outliers(model, p, [5])


def test_sampled_prediction_hook():
    class Sampler:
        def predict(self, X):
            return np.full(len(X), 2.0)

        def predict_samples(self, X):
            return np.tile(np.linspace(1.0, 3.0, 101), (len(X), 1))

    p = flat_panel()
    base = fit_daily_model(p)
    model = replace(base, regressor=Sampler())
    row = detect_outliers(model, p, [110], level=0.9).rows[0]
    assert row.prediction == pytest.approx(2.0)
    assert row.low == pytest.approx(1.1) and row.high == pytest.approx(2.9)


def test_model_comparison_table_shape():
    sim = simulate(SimulationConfig(k=3, T=250, sigma=1.0, seed=1))
    table = compare_daily_models(sim.panel, range(200, 250))
    assert list(table) == ["LastWeek", "Avg4Weeks", "linear", "MLP"]
    for m in table.values():
        assert m.n_rows == 50 and m.mean_ape >= 0 and 0 <= m.smape <= 2


def test_rollup_of_simulated_attribution():
    sim = simulate(SimulationConfig(k=3, T=200, seed=5))
    p = sim.panel
    scm = fit_scm(ad_matching_graph(p.categories), p, SCMConfig(train_range=(28, 199)))
    res = cf_shapley_exact(CounterfactualSession(scm, p, 199, 185))
    roll = rollup_by_category(res, input_roles(p.categories))
    assert roll.grand_total == pytest.approx(res.total, abs=1e-9)
