"""Daily-density forecasting and prediction-interval outlier flags.

The daily model regresses y_t on its own last 14 values. Its interval width
comes from residuals on a held-out validation tail (the last 20% of the
training days) so that intervals are not tuned on the rows the model saw.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from cfattrib.errors import InsufficientData, InsufficientHistory
from cfattrib.graph import DAILY_DENSITY
from cfattrib.models import (
    FeatureLayout,
    PredictionMetrics,
    Regressor,
    avg_4_weeks,
    last_week,
    make_regressor,
    prediction_metrics,
)
from cfattrib.panel import as_table, column

MIN_TRAIN_DAYS = 60
DEFAULT_LAGS = tuple(range(1, 15))
RESOLUTION = 1e-12


@dataclass(frozen=True, eq=False)
class DailyModel:
    layout: FeatureLayout
    regressor: Regressor
    residual_std: float
    train_days: tuple[int, int]
    validation_days: tuple[int, int]

    @property
    def node(self) -> str:
        return self.layout.node

    def predict_days(self, data, days: Iterable[int]) -> np.ndarray:
        X = self.layout.design(as_table(data), np.asarray(list(days), dtype=int))
        return np.asarray(self.regressor.predict(X), dtype=float).reshape(-1)

    def interval(self, prediction: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
        half = z_value(level) * self.residual_std
        return prediction - half, prediction + half


def z_value(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return float(norm.ppf(0.5 + level / 2))


def fit_daily_model(
    data,
    regressor: str | Regressor = "linear",
    lags: Sequence[int] = DEFAULT_LAGS,
    train_range: tuple[int, int] | None = None,
    burn_in: int = 28,
    validation_fraction: float = 0.2,
    node: str = DAILY_DENSITY,
    **regressor_params,
) -> DailyModel:
    """Fit y_t on lagged y and size the interval on a validation tail."""
    table = as_table(data)
    series = column(table, node)
    layout = FeatureLayout(node=node, lags=tuple(lags))
    start, stop = train_range if train_range is not None else (burn_in, len(series))
    start, stop = max(start, burn_in, layout.max_lag), min(stop, len(series))
    n = stop - start
    if n < MIN_TRAIN_DAYS:
        raise InsufficientData(f"{n} training days after burn-in (need >= {MIN_TRAIN_DAYS})")
    n_val = max(1, math.ceil(validation_fraction * n))
    split = stop - n_val
    if regressor == "linear" and not regressor_params:
        # periodic or flat series give collinear lag columns; the minimum-norm
        # solution fits them exactly, where a ridge would leave a biased pattern
        regressor_params = {"ridge": 0.0, "allow_singular": True}
    reg = make_regressor(regressor, **regressor_params)
    fit_days = np.arange(start, split)
    reg.fit(layout.design(table, fit_days), series[fit_days])
    val_days = np.arange(split, stop)
    resid = series[val_days] - np.asarray(reg.predict(layout.design(table, val_days)), dtype=float)
    # floor at the series' numerical resolution so that round-off left by an
    # exact fit is never mistaken for an excursion
    floor = RESOLUTION * float(np.max(np.abs(series[start:stop])))
    residual_std = max(float(np.sqrt(np.mean(resid**2))), floor)
    return DailyModel(layout, reg, residual_std, (int(start), int(split)), (int(split), int(stop)))


@dataclass(frozen=True)
class OutlierRow:
    day: int
    prediction: float
    low: float
    high: float
    observed: float

    @property
    def flagged(self) -> bool:
        return not self.low <= self.observed <= self.high


@dataclass(frozen=True)
class OutlierReport:
    level: float
    rows: tuple[OutlierRow, ...]

    @property
    def flagged_days(self) -> list[int]:
        return [r.day for r in self.rows if r.flagged]

    @property
    def flag_rate(self) -> float:
        return len(self.flagged_days) / len(self.rows) if self.rows else 0.0

    def as_records(self) -> list[dict]:
        return [
            {
                "day": r.day,
                "prediction": r.prediction,
                "low": r.low,
                "high": r.high,
                "observed": r.observed,
                "flagged": r.flagged,
            }
            for r in self.rows
        ]


def detect_outliers(model: DailyModel, data, eval_days: Iterable[int], level: float = 0.95) -> OutlierReport:
    """Flag the days whose observed value leaves the closed prediction interval."""
    days = np.asarray(list(eval_days), dtype=int)
    if days.size and days.min() < model.layout.max_lag:
        raise InsufficientHistory(f"day {days.min()} lacks the {model.layout.max_lag}-day lag history")
    observed = column(as_table(data), model.node)[days]
    sampler = getattr(model.regressor, "predict_samples", None)
    if sampler is not None:
        # external models may return prediction samples shaped (days, draws)
        samples = np.asarray(sampler(model.layout.design(as_table(data), days)), dtype=float)
        tail = (1 - level) / 2
        pred = np.median(samples, axis=1)
        low, high = np.quantile(samples, tail, axis=1), np.quantile(samples, 1 - tail, axis=1)
    else:
        pred = model.predict_days(data, days)
        low, high = model.interval(pred, level)
    rows = tuple(
        OutlierRow(int(d), float(p), float(lo), float(hi), float(o))
        for d, p, lo, hi, o in zip(days, pred, low, high, observed)
    )
    return OutlierReport(level=level, rows=rows)


DAILY_MODEL_NAMES = ("LastWeek", "Avg4Weeks", "linear", "MLP")


def compare_daily_models(
    data,
    holdout: Sequence[int],
    burn_in: int = 28,
    seed: int = 0,
    models: Sequence[str] = DAILY_MODEL_NAMES,
    node: str = DAILY_DENSITY,
) -> Mapping[str, PredictionMetrics]:
    """MAPE / MedAPE / sMAPE of each daily forecaster on the holdout days.

    Learned models train on the days between ``burn_in`` and the first holdout day.
    """
    days = np.asarray(list(holdout), dtype=int)
    actual = column(as_table(data), node)[days]
    out = {}
    for name in models:
        if name == "LastWeek":
            pred = [last_week(data, node, int(t)) for t in days]
        elif name == "Avg4Weeks":
            pred = [avg_4_weeks(data, node, int(t)) for t in days]
        elif name in ("linear", "MLP"):
            params = {"seed": seed} if name == "MLP" else {}
            model = fit_daily_model(
                data, name.lower(), train_range=(burn_in, int(days.min())), burn_in=burn_in, node=node, **params
            )
            pred = model.predict_days(data, days)
        else:
            raise ValueError(f"unknown daily model {name!r}")
        out[name] = prediction_metrics(actual, pred)
    return out
