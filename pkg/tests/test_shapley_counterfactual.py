import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import crash_graph
from oracles import permutation_shapley as oracle_shapley

from cfattrib.counterfactual import (
    REFERENCE,
    CounterfactualQuery,
    CounterfactualSession,
    abduce,
    counterfactual,
    counterfactual_batch,
)
from cfattrib.errors import DimensionMismatch, InsufficientHistory, InvalidNode
from cfattrib.graph import ANALYTIC, INPUT, LEARNED, NodeSpec, build_graph
from cfattrib.models import SCMConfig, fit_scm
from cfattrib.shapley import (
    exact_shapley,
    kernel_weight,
    permutation_shapley,
    popcount,
    shapley_weight,
)

# ---- Shapley core --------------------------------------------------------


def test_weights():
    assert shapley_weight(3, 0) == pytest.approx(1 / 3)
    assert shapley_weight(3, 1) == pytest.approx(1 / 6)
    assert kernel_weight(3, 1) == pytest.approx(1 / 3)
    assert kernel_weight(4, 2) == pytest.approx(3 / 24)
    with pytest.raises(ValueError):
        kernel_weight(3, 0)
    np.testing.assert_array_equal(popcount(np.array([0, 1, 5, 7, 1 << 40])), [0, 1, 2, 3, 1])


def table_game(values):
    def v(masks):
        return values[np.asarray(masks)]

    return v


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5).flatmap(lambda n: st.tuples(st.just(n), st.lists(st.floats(-100, 100), min_size=1 << n, max_size=1 << n))))
def test_exact_matches_permutation_oracle(case):
    n, vals = case
    values = np.array(vals)
    values[0] = 0.0
    phi = exact_shapley(table_game(values), n)
    expected = oracle_shapley(lambda S: values[sum(1 << i for i in S)], n)
    np.testing.assert_allclose(phi, expected, atol=1e-9)
    assert math.fsum(phi) == pytest.approx(values[-1], abs=1e-9)


def test_permutation_estimator():
    rng = np.random.default_rng(0)
    n = 6
    values = rng.normal(size=1 << n)
    values[0] = 0
    exact = exact_shapley(table_game(values), n)
    phi, se, contrib = permutation_shapley(table_game(values), n, 4000, np.random.default_rng(1))
    assert contrib.shape == (4000, n)
    # every ordering telescopes to v(N) - v(empty)
    np.testing.assert_allclose(contrib.sum(axis=1), values[-1], atol=1e-12)
    assert np.all(np.abs(phi - exact) < 5 * se + 1e-12)
    again, _, _ = permutation_shapley(table_game(values), n, 4000, np.random.default_rng(1))
    np.testing.assert_array_equal(phi, again)
    with pytest.raises(ValueError):
        permutation_shapley(table_game(values), n, 0, rng)


# ---- counterfactual engine -----------------------------------------------


def crash_session():
    g = crash_graph()
    table = {"x1": np.array([0.0, 1.0]), "x2": np.array([0.0, 1.0]), "x3": np.array([0.0, 1.0])}
    return CounterfactualSession(fit_scm(g, table), table, t=1, t_ref=0)


def test_crash_counterfactuals():
    s = crash_session()
    assert s.observed_output == 1.0
    assert s.counterfactual([]) == 1.0
    assert s.counterfactual(["x3"]) == 1.0  # 0.5 + 0.4 still reaches 0.9
    assert s.counterfactual(["x1", "x3"]) == 0.0
    assert s.counterfactual(["x1", "x2"]) == 1.0
    assert s.counterfactual({"x1": REFERENCE, "x2": "observed", "x3": REFERENCE}) == 0.0
    with pytest.raises(InvalidNode):
        s.counterfactual(["load"])
    with pytest.raises(ValueError):
        s.counterfactual({"x1": "sideways"})
    with pytest.raises(DimensionMismatch):
        s.values([8])


def lagged_system(T=300, seed=0, noise=0.3):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 3, T)
    z = rng.uniform(1, 3, T)
    v = np.zeros(T)
    for t in range(T):
        v[t] = 2 * x[t] - z[t] + 0.5 * (v[t - 1] if t else 0) + noise * rng.normal()
    specs = [
        NodeSpec("x", INPUT),
        NodeSpec("z", INPUT),
        NodeSpec("v", LEARNED, parents=("x", "z"), lags=(1,)),
        NodeSpec("out", ANALYTIC, parents=("v",), function="weighted_sum", params={"weights": [3.0]}),
    ]
    return build_graph(specs, "out"), {"x": x, "z": z, "v": v}


def test_counterfactual_matches_closed_form():
    g, table = lagged_system()
    scm = fit_scm(g, table, SCMConfig(train_range=(1, 250)))
    coef = scm.models["v"].parameters()["coefficients"]
    t, t_ref = 280, 273
    s = CounterfactualSession(scm, table, t, t_ref)
    # residual and lag stay at day t, so only the changed parent moves v
    expected = 3 * (table["v"][t] - coef["x"] * (table["x"][t] - table["x"][t_ref]))
    assert s.counterfactual(["x"]) == pytest.approx(expected, rel=1e-12)
    both = 3 * (
        table["v"][t] - coef["x"] * (table["x"][t] - table["x"][t_ref]) - coef["z"] * (table["z"][t] - table["z"][t_ref])
    )
    assert s.counterfactual(["x", "z"]) == pytest.approx(both, rel=1e-12)
    q = CounterfactualQuery(t, t_ref, {"x": REFERENCE, "z": "observed"})
    assert q.reference_set() == frozenset({"x"})
    assert counterfactual(scm, table, q) == pytest.approx(expected, rel=1e-12)
    assert counterfactual_batch(scm, table, t, t_ref, [[], ["x"]], session=s)[1] == s.counterfactual(["x"])


def test_abduction_round_trip_is_bit_exact():
    g, table = lagged_system(noise=1.0)
    scm = fit_scm(g, table, SCMConfig(train_range=(1, 200)))
    for t in range(2, 300, 7):
        s = CounterfactualSession(scm, table, t, t - 1)
        assert s.value(0) == 3.0 * table["v"][t]
    rec = abduce(scm, table, 100)
    pred = scm.models["v"].predict_rows(scm.models["v"].layout.design(table, [100]))[0]
    assert pred + rec.residuals["v"] == pytest.approx(table["v"][100], abs=1e-12)


def test_session_cache_and_guards():
    g, table = lagged_system()
    scm = fit_scm(g, table)
    s = CounterfactualSession(scm, table, 50, 40)
    s.values([0, 1, 2, 3])
    n_eval = s.evaluations
    s.values([3, 2, 1, 0, 1])
    assert s.evaluations == n_eval and s.cache_size == 4
    with pytest.raises(InsufficientHistory):
        CounterfactualSession(scm, table, 50, 0)
    with pytest.raises(InsufficientHistory):
        CounterfactualSession(scm, table, 300, 40)
    with pytest.raises(InvalidNode):
        counterfactual(scm, table, CounterfactualQuery(50, 40, {"x": REFERENCE}))


def test_clamp_at_zero_counts_events():
    specs = [NodeSpec("x", INPUT), NodeSpec("d", LEARNED, parents=("x",)), NodeSpec("o", ANALYTIC, parents=("d",), function="maximum")]
    g = build_graph(specs, "o")
    x = np.linspace(1, 10, 100)
    table = {"x": x, "d": 5 * x - 4}
    x2 = x.copy()
    x2[0] = -10.0  # reference day far below the support
    table["x"] = x2
    scm = fit_scm(g, {"x": x, "d": 5 * x - 4})
    s = CounterfactualSession(scm, table, 50, 0)
    assert s.counterfactual(["x"]) == 0.0
    assert s.clamp_events == 1
    raw = CounterfactualSession(fit_scm(g, {"x": x, "d": 5 * x - 4}, SCMConfig(clamp_at_zero=False)), table, 50, 0)
    assert raw.counterfactual(["x"]) < 0
