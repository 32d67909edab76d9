"""Structural equations for learned nodes.

A learned node ``v`` is modelled as ``v_t = f(parents_t, v_{t-l1}, ..., v_{t-lr}) + e_t``
with additive noise ``e_t``. This module builds the feature rows, fits ``f``
with a pluggable regressor, and evaluates point forecasts.
"""

from __future__ import annotations

import copy
import math
import warnings
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Protocol

import numpy as np

from cfattrib.errors import (
    DimensionMismatch,
    InsufficientData,
    InsufficientHistory,
    InvalidNode,
    MissingColumn,
    SingularDesign,
)
from cfattrib.graph import ANALYTIC, LEARNED, CausalGraph
from cfattrib.panel import Table, as_table, column

MIN_ROWS_PER_FEATURE = 10


class Regressor(Protocol):
    def fit(self, X: np.ndarray, y: np.ndarray) -> Regressor: ...

    def predict(self, X: np.ndarray) -> np.ndarray: ...


class LinearRegressor:
    """Least squares with an optional ridge penalty on standardized coefficients.

    Constant or exactly collinear feature columns raise :class:`SingularDesign`
    unless ``allow_singular`` is set, in which case constant columns get a zero
    coefficient and the ridge term resolves the rest.
    """

    def __init__(self, ridge: float = 1e-6, allow_singular: bool = False):
        if ridge < 0:
            raise ValueError("ridge must be non-negative")
        self.ridge = ridge
        self.allow_singular = allow_singular
        self.coef_: np.ndarray | None = None
        self.intercept_: float = 0.0

    def fit(self, X: np.ndarray, y: np.ndarray) -> LinearRegressor:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n, p = X.shape
        self.coef_ = np.zeros(p)
        if np.ptp(y) == 0.0:
            self.intercept_ = float(y[0])
            return self
        y_mean = y.mean()
        if p == 0:
            self.intercept_ = float(y_mean)
            return self

        x_mean = X.mean(axis=0)
        x_std = X.std(axis=0)
        constant = x_std <= 1e-12 * np.maximum(1.0, np.abs(x_mean))
        if constant.any() and not self.allow_singular:
            raise SingularDesign(f"constant feature column(s) {np.flatnonzero(constant).tolist()}")
        keep = ~constant
        if not keep.any():
            self.intercept_ = float(y_mean)
            return self
        Z = (X[:, keep] - x_mean[keep]) / x_std[keep]
        if not self.allow_singular and np.linalg.matrix_rank(Z) < Z.shape[1]:
            raise SingularDesign("feature columns are collinear")
        target = (y - y_mean) / math.sqrt(n)
        A = Z / math.sqrt(n)
        if self.ridge > 0:
            A = np.vstack([A, math.sqrt(self.ridge) * np.eye(Z.shape[1])])
            target = np.concatenate([target, np.zeros(Z.shape[1])])
        w, *_ = np.linalg.lstsq(A, target, rcond=None)
        self.coef_[keep] = w / x_std[keep]
        self.intercept_ = float(y_mean - x_mean[keep] @ self.coef_[keep])
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.coef_ is None:
            raise RuntimeError("LinearRegressor is not fitted")
        X = np.asarray(X, dtype=float)
        return X @ self.coef_ + self.intercept_

    def get_params(self) -> dict[str, Any]:
        return {"ridge": self.ridge, "allow_singular": self.allow_singular}


class MLPRegressor:
    """Feed-forward network with two hidden layers (three weight layers).

    Thin wrapper over scikit-learn's MLP that standardizes inputs and target;
    training is seeded, so equal seeds give bit-identical parameters.
    """

    def __init__(
        self,
        hidden: int = 32,
        epochs: int = 300,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        alpha: float = 1e-4,
        seed: int = 0,
    ):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.alpha = alpha
        self.seed = seed
        self._net = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> MLPRegressor:
        from sklearn.exceptions import ConvergenceWarning
        from sklearn.neural_network import MLPRegressor as _SkMLP

        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        self._x_mean = X.mean(axis=0)
        self._x_std = np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
        self._y_mean = float(y.mean())
        self._y_std = float(y.std()) or 1.0
        self._net = _SkMLP(
            hidden_layer_sizes=(self.hidden, self.hidden),
            activation="relu",
            solver="adam",
            batch_size=min(self.batch_size, len(y)),
            learning_rate_init=self.learning_rate,
            alpha=self.alpha,
            max_iter=self.epochs,
            shuffle=True,
            random_state=self.seed,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            self._net.fit((X - self._x_mean) / self._x_std, (y - self._y_mean) / self._y_std)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self._net is None:
            raise RuntimeError("MLPRegressor is not fitted")
        X = np.asarray(X, dtype=float)
        if X.shape[0] == 0:
            return np.zeros(0)
        z = self._net.predict((X - self._x_mean) / self._x_std)
        return np.asarray(z, dtype=float).reshape(-1) * self._y_std + self._y_mean

    def get_params(self) -> dict[str, Any]:
        return {
            "hidden": self.hidden,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "alpha": self.alpha,
            "seed": self.seed,
        }


REGRESSORS: dict[str, Callable[..., Regressor]] = {
    "linear": LinearRegressor,
    "mlp": MLPRegressor,
}


def make_regressor(kind: str | Regressor = "linear", **params) -> Regressor:
    """Fresh unfitted regressor from a registry name or a template instance."""
    if isinstance(kind, str):
        try:
            return REGRESSORS[kind](**params)
        except KeyError:
            raise ValueError(f"unknown regressor {kind!r}; choose from {sorted(REGRESSORS)}") from None
    if params:
        raise ValueError("params are only accepted with a registry name")
    if not (hasattr(kind, "fit") and hasattr(kind, "predict")):
        raise TypeError("regressor must provide fit(X, y) and predict(X)")
    return copy.deepcopy(kind)


def biweekly_sign(days: np.ndarray | int, period: int = 7) -> np.ndarray:
    """+1 when floor(t / period) is even, else -1."""
    return np.where((np.asarray(days) // period) % 2 == 0, 1.0, -1.0)


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of a learned node's design matrix.

    Columns are: parent values at t, own values at t - lag for each lag, then
    optional engineered columns: parent ratios ``a / b`` and sign-modulated lags
    ``s(t) * v_{t-lag}`` where ``s`` alternates every ``sign_period`` days.
    """

    node: str
    parents: tuple[str, ...] = ()
    lags: tuple[int, ...] = ()
    ratios: tuple[tuple[str, str], ...] = ()
    signed_lags: tuple[int, ...] = ()
    sign_period: int = 7

    def __post_init__(self) -> None:
        object.__setattr__(self, "parents", tuple(self.parents))
        object.__setattr__(self, "lags", tuple(int(v) for v in self.lags))
        object.__setattr__(self, "ratios", tuple(tuple(r) for r in self.ratios))
        object.__setattr__(self, "signed_lags", tuple(int(v) for v in self.signed_lags))
        for num, den in self.ratios:
            if num not in self.parents or den not in self.parents:
                raise InvalidNode(f"ratio feature {num}/{den} of {self.node!r} must use parents")
        if any(v <= 0 for v in self.lags + self.signed_lags):
            raise InvalidNode(f"lags of {self.node!r} must be strictly positive")

    @property
    def feature_names(self) -> list[str]:
        names = list(self.parents)
        names += [f"{self.node}@t-{lag}" for lag in self.lags]
        names += [f"{num}/{den}" for num, den in self.ratios]
        names += [f"sign{self.sign_period}*{self.node}@t-{lag}" for lag in self.signed_lags]
        return names

    @property
    def n_features(self) -> int:
        return len(self.parents) + len(self.lags) + len(self.ratios) + len(self.signed_lags)

    @property
    def max_lag(self) -> int:
        return max(self.lags + self.signed_lags, default=0)

    def context(self, table: Table, days: np.ndarray) -> np.ndarray:
        """History-dependent columns (plain lags, then signed lags) for ``days``."""
        days = np.atleast_1d(np.asarray(days, dtype=int))
        if days.size and days.min() < self.max_lag:
            raise InsufficientHistory(
                f"node {self.node!r} needs {self.max_lag} days of history, asked for day {days.min()}"
            )
        cols = []
        if self.lags or self.signed_lags:
            own = column(table, self.node)
            if days.size and days.max() >= len(own):
                raise InsufficientHistory(f"day {days.max()} is past the end of {self.node!r}")
            cols += [own[days - lag] for lag in self.lags]
            sign = biweekly_sign(days, self.sign_period)
            cols += [sign * own[days - lag] for lag in self.signed_lags]
        if not cols:
            return np.zeros((days.size, 0))
        return np.column_stack(cols)

    def assemble(self, parent_values: Mapping[str, np.ndarray], context: np.ndarray) -> np.ndarray:
        """Design rows from per-parent value vectors and a context block.

        ``context`` may hold a single row that is broadcast against the parents.
        """
        n = context.shape[0]
        for p in self.parents:
            n = max(n, np.size(parent_values[p]))
        n_lag = len(self.lags)
        cols = [np.broadcast_to(np.asarray(parent_values[p], dtype=float), (n,)) for p in self.parents]
        cols += [np.broadcast_to(context[:, j], (n,)) for j in range(n_lag)]
        cols += [
            np.broadcast_to(np.asarray(parent_values[a], dtype=float) / np.asarray(parent_values[b], dtype=float), (n,))
            for a, b in self.ratios
        ]
        cols += [np.broadcast_to(context[:, n_lag + j], (n,)) for j in range(len(self.signed_lags))]
        if not cols:
            return np.zeros((n, 0))
        return np.column_stack(cols)

    def design(self, table: Table, days: Iterable[int]) -> np.ndarray:
        days = np.atleast_1d(np.asarray(list(days) if not isinstance(days, np.ndarray) else days, dtype=int))
        context = self.context(table, days)
        parents = {p: column(table, p)[days] for p in self.parents}
        return self.assemble(parents, context)


def layout_for(graph: CausalGraph, node: str, engineered: Mapping[str, Mapping[str, Any]] | None = None) -> FeatureLayout:
    spec = graph[node]
    if spec.kind != LEARNED:
        raise InvalidNode(f"node {node!r} is {spec.kind}, not learned")
    extra = dict((engineered or {}).get(node, {}))
    return FeatureLayout(node=node, parents=spec.parents, lags=spec.lags, **extra)


def make_lag_features(data, layout: FeatureLayout, t: int) -> np.ndarray:
    """Feature vector for ``layout.node`` on day ``t`` (order: ``layout.feature_names``)."""
    table = as_table(data)
    if t < layout.max_lag:
        raise InsufficientHistory(f"day {t} is earlier than the largest lag {layout.max_lag} of {layout.node!r}")
    return layout.design(table, [t])[0]


def exact_residual(target: np.ndarray, prediction: np.ndarray) -> np.ndarray:
    """``target - prediction``, nudged so that ``prediction + r == target`` where possible.

    Equality is unreachable when ``|target|`` is far below ``|prediction|``
    (the sum cannot resolve it); the result is then within one ulp of
    ``prediction``.
    """
    target = np.asarray(target, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    r = target - prediction
    for _ in range(4):
        miss = prediction + r != target
        if not np.any(miss):
            return r
        # refine with the rounding error of the sum
        r = np.where(miss, r + (target - (prediction + r)), r)
    for _ in range(64):
        miss = prediction + r != target
        if not np.any(miss):
            break
        toward = np.where(prediction + r < target, np.inf, -np.inf)
        step = np.maximum(np.abs(np.nextafter(r, toward) - r), np.spacing(np.abs(target)) / 2)
        r = np.where(miss, r + np.sign(toward) * step, r)
    return r


@dataclass(frozen=True, eq=False)
class FittedNodeModel:
    node: str
    layout: FeatureLayout
    regressor: Regressor
    residual_scale: float
    train_days: tuple[int, int]
    train_residuals: np.ndarray = field(repr=False)

    @property
    def feature_names(self) -> list[str]:
        return self.layout.feature_names

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.layout.n_features:
            raise DimensionMismatch(f"{self.node!r} expects {self.layout.n_features} features, got shape {X.shape}")
        return np.asarray(self.regressor.predict(X), dtype=float).reshape(-1)

    def parameters(self) -> dict[str, Any]:
        reg = self.regressor
        if isinstance(reg, LinearRegressor):
            return {
                "intercept": reg.intercept_,
                "coefficients": dict(zip(self.feature_names, map(float, reg.coef_))),
            }
        params = reg.get_params() if hasattr(reg, "get_params") else {}
        return {"regressor": type(reg).__name__, "hyperparameters": params}


def predict(model: FittedNodeModel, features: Sequence[float]) -> float:
    x = np.asarray(features, dtype=float)
    if x.ndim != 1 or x.size != model.layout.n_features:
        raise DimensionMismatch(f"{model.node!r} expects {model.layout.n_features} features, got {x.size}")
    return float(model.predict_rows(x[None, :])[0])


def _series_length(table: Table) -> int:
    lengths = {len(v) for v in table.values()}
    if len(lengths) != 1:
        raise DimensionMismatch(f"columns have differing lengths {sorted(lengths)}")
    return lengths.pop()


def fit_node_model(
    data,
    layout: FeatureLayout,
    regressor: str | Regressor = "linear",
    train_range: tuple[int, int] | None = None,
    **regressor_params,
) -> FittedNodeModel:
    """Fit one structural equation on days ``[start, stop)`` of ``train_range``."""
    table = as_table(data)
    target = column(table, layout.node)
    start, stop = train_range if train_range is not None else (layout.max_lag, len(target))
    if start < layout.max_lag:
        raise InsufficientHistory(f"training for {layout.node!r} starts at day {start}, before lag {layout.max_lag}")
    stop = min(stop, len(target))
    n_rows = stop - start
    needed = MIN_ROWS_PER_FEATURE * max(layout.n_features, 1)
    if n_rows < needed:
        raise InsufficientData(
            f"{layout.node!r}: {n_rows} training rows for {layout.n_features} features (need >= {needed})"
        )
    days = np.arange(start, stop)
    X = layout.design(table, days)
    y = target[days]
    reg = make_regressor(regressor, **regressor_params)
    try:
        reg.fit(X, y)
    except SingularDesign as exc:
        raise SingularDesign(f"{layout.node!r}: {exc}") from None
    fitted = np.asarray(reg.predict(X), dtype=float).reshape(-1)
    residuals = exact_residual(y, fitted)
    residuals.setflags(write=False)
    return FittedNodeModel(
        node=layout.node,
        layout=layout,
        regressor=reg,
        residual_scale=float(np.std(residuals)),
        train_days=(int(start), int(stop)),
        train_residuals=residuals,
    )


@dataclass(frozen=True)
class SCMConfig:
    """How to fit the learned nodes of a graph.

    ``engineered`` maps a node name to extra :class:`FeatureLayout` fields
    (``ratios``, ``signed_lags``, ``sign_period``). ``clamp_at_zero`` floors
    counterfactual values of learned nodes at 0 (densities are non-negative).
    """

    regressor: str | Any = "linear"
    regressor_params: Mapping[str, Any] = field(default_factory=dict)
    train_range: tuple[int, int] | None = None
    engineered: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    clamp_at_zero: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "regressor_params", MappingProxyType(dict(self.regressor_params)))
        object.__setattr__(self, "engineered", MappingProxyType(dict(self.engineered)))


@dataclass(frozen=True, eq=False)
class FittedSCM:
    graph: CausalGraph
    models: Mapping[str, FittedNodeModel]
    config: SCMConfig

    @property
    def max_lag(self) -> int:
        return max((m.layout.max_lag for m in self.models.values()), default=0)

    def summary(self) -> dict[str, Any]:
        return {
            name: {
                "features": model.feature_names,
                "train_days": list(model.train_days),
                "residual_scale": model.residual_scale,
                "parameters": model.parameters(),
            }
            for name, model in self.models.items()
        }


def with_analytic_columns(graph: CausalGraph, table: Table) -> Table:
    """Add the series of analytic nodes the table lacks, computed from their parents."""
    missing = [n for n in graph.analytic if n not in table]
    if not missing:
        return table
    table = dict(table)
    for node in graph.order:
        spec = graph[node]
        if spec.kind == ANALYTIC and node not in table:
            if not all(p in table for p in spec.parents):
                continue
            table[node] = spec.evaluate(np.column_stack([table[p] for p in spec.parents]))
    return table


def fit_scm(graph: CausalGraph, data, config: SCMConfig | None = None) -> FittedSCM:
    """Fit every learned node; input nodes pass through, analytic nodes stay closed-form."""
    config = config or SCMConfig()
    table = with_analytic_columns(graph, as_table(data))
    for node in graph.learned:
        if node not in table:
            raise MissingColumn(f"learned node {node!r} has no data column")
        for parent in graph[node].parents:
            if parent not in table:
                raise MissingColumn(f"parent {parent!r} of learned node {node!r} has no data column")
    for node in graph.inputs:
        if node not in table:
            raise MissingColumn(f"input node {node!r} has no data column")
    unknown = set(config.engineered) - set(graph.learned)
    if unknown:
        raise InvalidNode(f"engineered features given for non-learned nodes {sorted(unknown)}")
    models = {}
    for node in graph.learned:
        layout = layout_for(graph, node, config.engineered)
        train_range = config.train_range
        if train_range is not None:
            train_range = (max(train_range[0], layout.max_lag), train_range[1])
        models[node] = fit_node_model(
            table, layout, config.regressor, train_range, **dict(config.regressor_params)
        )
    return FittedSCM(graph=graph, models=MappingProxyType(models), config=config)


@dataclass(frozen=True)
class PredictionMetrics:
    mean_ape: float
    median_ape: float
    smape: float
    n_rows: int
    n_zero_excluded: int = 0

    def as_dict(self) -> dict[str, float | int]:
        return {
            "mean_ape": self.mean_ape,
            "median_ape": self.median_ape,
            "smape": self.smape,
            "n_rows": self.n_rows,
            "n_zero_excluded": self.n_zero_excluded,
        }


def prediction_metrics(actual: Sequence[float], predicted: Sequence[float]) -> PredictionMetrics:
    """MAPE and median APE in percent, sMAPE as a 0..2 ratio.

    Rows with a zero actual are left out of the APE metrics and counted.
    Sums use ``math.fsum`` so the result does not depend on row order.
    """
    y = np.asarray(actual, dtype=float)
    yhat = np.asarray(predicted, dtype=float)
    if y.shape != yhat.shape:
        raise DimensionMismatch(f"{y.shape} actuals vs {yhat.shape} predictions")
    if y.size == 0:
        raise InsufficientData("no rows to evaluate")
    err = np.abs(yhat - y)
    nonzero = y != 0
    ape = err[nonzero] / np.abs(y[nonzero]) * 100.0
    denom = np.abs(y) + np.abs(yhat)
    sym = np.divide(2.0 * err, denom, out=np.zeros_like(err), where=denom > 0)
    return PredictionMetrics(
        mean_ape=math.fsum(ape) / ape.size if ape.size else float("nan"),
        median_ape=float(np.median(ape)) if ape.size else float("nan"),
        smape=math.fsum(sym) / sym.size,
        n_rows=int(y.size),
        n_zero_excluded=int((~nonzero).sum()),
    )


PointForecaster = Callable[[Table, str, int], float]


def evaluate_model(predictor: FittedNodeModel | PointForecaster, data, holdout: Iterable[int], node: str | None = None) -> PredictionMetrics:
    """Score a fitted node model or a baseline forecaster on held-out days."""
    table = as_table(data)
    days = np.asarray(sorted(holdout) if not isinstance(holdout, np.ndarray) else holdout, dtype=int)
    if isinstance(predictor, FittedNodeModel):
        node = predictor.node
        lo, hi = predictor.train_days
        if np.any((days >= lo) & (days < hi)):
            raise ValueError(f"holdout overlaps the training days [{lo}, {hi}) of {node!r}")
        yhat = predictor.predict_rows(predictor.layout.design(table, days))
    else:
        if node is None:
            raise ValueError("node is required when evaluating a baseline forecaster")
        yhat = np.array([predictor(table, node, int(t)) for t in days])
    return prediction_metrics(column(table, node)[days], yhat)


def last_period(data, node: str, t: int, period: int = 7) -> float:
    series = column(as_table(data), node)
    if t < period:
        raise InsufficientHistory(f"day {t} has no value {period} days earlier")
    return float(series[t - period])


def last_week(data, node: str, t: int) -> float:
    """Value on the same weekday one week earlier."""
    return last_period(data, node, t, 7)


def avg_4_weeks(data, node: str, t: int) -> float:
    """Mean of the values 7, 14, 21 and 28 days earlier."""
    series = column(as_table(data), node)
    if t < 28:
        raise InsufficientHistory(f"day {t} has fewer than 28 days of history")
    return math.fsum(series[t - lag] for lag in (7, 14, 21, 28)) / 4.0


BASELINE_FORECASTERS: dict[str, PointForecaster] = {
    "LastWeek": last_week,
    "Avg4Weeks": avg_4_weeks,
}
