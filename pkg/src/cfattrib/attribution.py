"""Attribution of an observed output change to the system inputs.

The counterfactual scores treat "input set to its reference-day value" as the
coalition move: the value of a coalition S is ``Y(u) - Y_{s'}(u)`` under the
day-t noise ``u``, so a player's marginal contribution is the counterfactual
drop in output from additionally resetting it. Baselines (plain Shapley on a
direct predictor, interventional Shapley, and raw input deltas) are included
for comparison.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from cfattrib import rng as rngmod
from cfattrib.counterfactual import CounterfactualSession
from cfattrib.errors import (
    DimensionMismatch,
    InsufficientData,
    TooManyInputs,
    UnmappedInput,
)
from cfattrib.models import Regressor, make_regressor
from cfattrib.panel import PanelDataset
from cfattrib.shapley import (
    exact_shapley,
    kernel_weight,
    permutation_shapley,
    popcount,
    unique_values,
)

CF_SHAPLEY_EXACT = "cf_shapley_exact"
CF_SHAPLEY_MC = "cf_shapley_mc"
SHAPLEY_DIRECT = "shapley_direct"
DO_SHAPLEY = "do_shapley"
AD_DEMAND_DELTA = "ad_demand_delta"
QV_DELTA = "qv_delta"
PRODUCT_DELTA = "product_delta"
METHODS = (CF_SHAPLEY_EXACT, CF_SHAPLEY_MC, SHAPLEY_DIRECT, DO_SHAPLEY, AD_DEMAND_DELTA, QV_DELTA, PRODUCT_DELTA)
DELTA_METHODS = (AD_DEMAND_DELTA, QV_DELTA, PRODUCT_DELTA)

EXACT_HARD_CAP = 20
EXACT_SOFT_CAP = 12
MC_CAP = 62
_EVAL_CHUNK_ROWS = 400_000


@dataclass
class AttributionResult:
    """Scores keyed by input name (or by category for the delta baselines)."""

    method: str
    scores: dict[str, float]
    efficiency_target: float | None = None
    efficiency_residual: float | None = None
    mc_std_error: dict[str, float] | None = None
    seed: int | None = None
    M: int | None = None
    t: int | None = None
    t_ref: int | None = None
    level: str = "input"
    clamp_events: int = 0
    n_evaluations: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return math.fsum(self.scores.values())

    @property
    def combined_std_error(self) -> float | None:
        if self.mc_std_error is None:
            return None
        return math.sqrt(math.fsum(se * se for se in self.mc_std_error.values()))

    def ranking(self) -> list[str]:
        """Names by descending score; ties keep insertion order."""
        names = list(self.scores)
        return sorted(names, key=lambda n: (-self.scores[n], names.index(n)))


def _player_masks(session: CounterfactualSession, players: Sequence[str], masks: np.ndarray) -> np.ndarray:
    """Translate player-index bitmasks into session-input bitmasks."""
    if tuple(players) == session.inputs:
        return masks
    out = np.zeros_like(masks)
    for j, name in enumerate(players):
        out |= ((masks >> j) & 1) << np.int64(session.inputs.index(name))
    return out


def _cf_game(session: CounterfactualSession, players: Sequence[str]):
    y_obs = session.value(0)

    def value(masks: np.ndarray) -> np.ndarray:
        return y_obs - session.values(_player_masks(session, players, masks))

    return value


def _players(session: CounterfactualSession, inputs: Sequence[str] | None) -> tuple[str, ...]:
    players = tuple(inputs) if inputs is not None else session.inputs
    unknown = [p for p in players if p not in session.inputs]
    if unknown:
        raise UnmappedInput(f"players {unknown} are not inputs of the session")
    if len(set(players)) != len(players):
        raise ValueError("duplicate players")
    return players


def _cf_result(method, session, players, phi, **kw) -> AttributionResult:
    full = _player_masks(session, players, np.array([(1 << len(players)) - 1], dtype=np.int64))[0]
    target = session.value(0) - session.value(int(full))
    scores = {p: float(v) for p, v in zip(players, phi)}
    return AttributionResult(
        method=method,
        scores=scores,
        efficiency_target=target,
        efficiency_residual=math.fsum(scores.values()) - target,
        t=session.t,
        t_ref=session.t_ref,
        clamp_events=session.clamp_events,
        n_evaluations=session.evaluations,
        **kw,
    )


def cf_shapley_exact(session: CounterfactualSession, inputs: Sequence[str] | None = None) -> AttributionResult:
    """CF-Shapley by full subset enumeration (2^n counterfactuals)."""
    players = _players(session, inputs)
    n = len(players)
    if n > EXACT_HARD_CAP:
        raise TooManyInputs(f"exact enumeration is capped at {EXACT_HARD_CAP} inputs, got {n}")
    if n > EXACT_SOFT_CAP:
        warnings.warn(f"exact CF-Shapley over {n} inputs needs {1 << n} counterfactuals", stacklevel=2)
    phi = exact_shapley(_cf_game(session, players), n)
    return _cf_result(CF_SHAPLEY_EXACT, session, players, phi)


def cf_shapley_mc(
    session: CounterfactualSession, inputs: Sequence[str] | None = None, M: int = 1000, seed: int = 0
) -> AttributionResult:
    """CF-Shapley from ``M`` sampled input orderings.

    Orderings come from the seed's ``cf_shapley_mc`` stream and are evaluated
    as one batch, so the result does not depend on how work is split.
    """
    players = _players(session, inputs)
    n = len(players)
    if n > MC_CAP:
        raise TooManyInputs(f"permutation sampling supports at most {MC_CAP} inputs, got {n}")
    phi, se, _ = permutation_shapley(_cf_game(session, players), n, M, rngmod.stream(seed, CF_SHAPLEY_MC))
    return _cf_result(
        CF_SHAPLEY_MC,
        session,
        players,
        phi,
        mc_std_error={p: float(s) for p, s in zip(players, se)},
        seed=seed,
        M=M,
    )


@dataclass(eq=False)
class DirectModel:
    """Predictor of the output straight from the flat input row."""

    feature_names: tuple[str, ...]
    regressor: Regressor
    background: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatch(f"direct model expects {self.n_features} features, got shape {X.shape}")
        return np.asarray(self.regressor.predict(X), dtype=float).reshape(-1)


def fit_direct_model(
    panel: PanelDataset, train_range: tuple[int, int], regressor: str | Regressor = "linear", **params
) -> DirectModel:
    """Regress daily density on ``[ad_1..ad_k, qv_1..qv_k]`` over ``[start, stop)``."""
    start, stop = train_range
    days = np.arange(start, min(stop, panel.T))
    if days.size < 10 * 2 * panel.k:
        raise InsufficientData(f"{days.size} rows for {2 * panel.k} direct-model features")
    X = np.vstack([panel.ad[:, days], panel.qv[:, days]]).T
    reg = make_regressor(regressor, **params)
    reg.fit(X, panel.y[days])
    return DirectModel(tuple(panel.input_names()), reg, X)


def _chunked(fn, rows_per_mask: int, masks: np.ndarray) -> np.ndarray:
    per_chunk = max(1, _EVAL_CHUNK_ROWS // max(rows_per_mask, 1))
    return np.concatenate([fn(masks[i : i + per_chunk]) for i in range(0, masks.size, per_chunk)]) if masks.size else np.zeros(0)


def _check_rows(model: DirectModel, *rows: np.ndarray) -> None:
    for row in rows:
        if row.ndim != 1 or row.size != model.n_features:
            raise DimensionMismatch(f"expected a row of {model.n_features} features, got shape {row.shape}")


def _mask_bits(masks: np.ndarray, n: int) -> np.ndarray:
    return ((masks[:, None] >> np.arange(n, dtype=np.int64)) & 1).astype(bool)


def _shapley_for_game(value, n, M, seed, stream_name, exact):
    if exact:
        return exact_shapley(lambda m: unique_values(value, m), n), None
    phi, se, _ = permutation_shapley(lambda m: unique_values(value, m), n, M, rngmod.stream(seed, stream_name))
    return phi, se


def shapley_direct(
    direct_model: DirectModel,
    observed_row: Sequence[float],
    reference_row: Sequence[float],
    M: int = 1000,
    seed: int = 0,
    exact: bool = False,
) -> AttributionResult:
    """Shapley values of the direct predictor with reference-replacement masking.

    v(S) = g(x with S observed and the rest at reference) - g(reference).
    """
    x = np.asarray(observed_row, dtype=float)
    r = np.asarray(reference_row, dtype=float)
    _check_rows(direct_model, x, r)
    n = x.size
    base = float(direct_model.predict(r[None, :])[0])

    def value(masks: np.ndarray) -> np.ndarray:
        def chunk(ms):
            return direct_model.predict(np.where(_mask_bits(ms, n), x, r)) - base

        return _chunked(chunk, 1, masks)

    phi, se = _shapley_for_game(value, n, M, seed, SHAPLEY_DIRECT, exact)
    target = float(direct_model.predict(x[None, :])[0]) - base
    scores = {name: float(v) for name, v in zip(direct_model.feature_names, phi)}
    return AttributionResult(
        method=SHAPLEY_DIRECT,
        scores=scores,
        efficiency_target=target,
        efficiency_residual=math.fsum(scores.values()) - target,
        mc_std_error=None if se is None else {k: float(s) for k, s in zip(scores, se)},
        seed=seed,
        M=None if exact else M,
    )


def do_shapley(
    direct_model: DirectModel,
    observed_row: Sequence[float],
    background: np.ndarray | None = None,
    M: int = 1000,
    seed: int = 0,
    n_samples: int = 100,
    exact: bool = False,
) -> AttributionResult:
    """Interventional Shapley values for mutually independent direct causes.

    v(S) = E[Y | do(X_S = x_S)] - E[Y], each expectation estimated by averaging
    the direct predictor over ``n_samples`` rows whose non-S columns are drawn
    independently from the empirical marginals of ``background``. The same
    draws are shared by every coalition.
    """
    x = np.asarray(observed_row, dtype=float)
    _check_rows(direct_model, x)
    bg = np.asarray(direct_model.background if background is None else background, dtype=float)
    if bg.ndim != 2 or bg.shape[1] != x.size:
        raise DimensionMismatch(f"background must be shaped (rows, {x.size}), got {bg.shape}")
    if bg.shape[0] < 30:
        raise InsufficientData(f"empirical marginals need >= 30 rows, got {bg.shape[0]}")
    n = x.size
    draw = rngmod.stream(seed, DO_SHAPLEY, 0)
    Z = bg[draw.integers(0, bg.shape[0], size=(n_samples, n)), np.arange(n)]
    base = float(direct_model.predict(Z).mean())

    def value(masks: np.ndarray) -> np.ndarray:
        def chunk(ms):
            bits = _mask_bits(ms, n)[:, None, :]
            rows = np.where(bits, x, Z[None, :, :]).reshape(-1, n)
            return direct_model.predict(rows).reshape(ms.size, n_samples).mean(axis=1) - base

        return _chunked(chunk, n_samples, masks)

    phi, se = _shapley_for_game(value, n, M, seed, DO_SHAPLEY, exact)
    target = float(value(np.array([(1 << n) - 1], dtype=np.int64))[0])
    scores = {name: float(v) for name, v in zip(direct_model.feature_names, phi)}
    return AttributionResult(
        method=DO_SHAPLEY,
        scores=scores,
        efficiency_target=target,
        efficiency_residual=math.fsum(scores.values()) - target,
        mc_std_error=None if se is None else {k: float(s) for k, s in zip(scores, se)},
        seed=seed,
        M=None if exact else M,
        metadata={"n_samples": n_samples},
    )


def delta_baselines(panel: PanelDataset, t: int, t_ref: int, relative: bool = False) -> dict[str, AttributionResult]:
    """Per-category absolute change in ad demand, query volume and den*qv.

    With ``relative`` the changes are divided by the reference-day magnitude.
    """
    for day in (t, t_ref):
        if not 0 <= day < panel.T:
            raise IndexError(f"day {day} outside the panel (T={panel.T})")
    now = {"ad": panel.ad[:, t], "qv": panel.qv[:, t], "prod": panel.den[:, t] * panel.qv[:, t]}
    ref = {"ad": panel.ad[:, t_ref], "qv": panel.qv[:, t_ref], "prod": panel.den[:, t_ref] * panel.qv[:, t_ref]}
    out = {}
    for method, key in ((AD_DEMAND_DELTA, "ad"), (QV_DELTA, "qv"), (PRODUCT_DELTA, "prod")):
        delta = np.abs(now[key] - ref[key])
        if relative:
            delta = np.divide(delta, np.abs(ref[key]), out=np.full_like(delta, np.inf), where=ref[key] != 0)
        out[method] = AttributionResult(
            method=method,
            scores={c: float(d) for c, d in zip(panel.categories, delta)},
            t=t,
            t_ref=t_ref,
            level="category",
            metadata={"relative": relative},
        )
    return out


@dataclass(frozen=True)
class AxiomReport:
    efficiency_residual: float
    approximation_loss: float
    optimal_loss: float
    optimal_scores: tuple[float, ...]

    @property
    def approximation_gap(self) -> float:
        return self.approximation_loss - self.optimal_loss


def _wls_loss(nu: np.ndarray, masks: np.ndarray, weights: np.ndarray, phi: np.ndarray, n: int) -> float:
    bits = _mask_bits(masks, n).astype(float)
    resid = nu - bits @ phi
    return math.fsum(weights * resid * resid)


def check_axioms(
    session: CounterfactualSession, scores: Mapping[str, float], inputs: Sequence[str] | None = None
) -> AxiomReport:
    """Efficiency residual and the kernel-weighted least-squares check.

    The least-squares objective sums over proper non-empty coalitions S of
    ``w(S) * (nu(S) - sum_{i in S} phi_i)^2`` with the Shapley kernel ``w``,
    where ``nu(S) = Y(u) - Y_{s'}(u)``; its optimum is taken subject to
    efficiency and found by eliminating the last player.
    """
    players = tuple(inputs) if inputs is not None else tuple(scores)
    players = _players(session, players)
    n = len(players)
    if n > EXACT_SOFT_CAP:
        raise TooManyInputs(f"the approximation check enumerates 2^n coalitions; n={n} exceeds {EXACT_SOFT_CAP}")
    phi = np.array([scores[p] for p in players], dtype=float)
    game = _cf_game(session, players)
    full = (1 << n) - 1
    total = float(game(np.array([full], dtype=np.int64))[0])
    efficiency_residual = math.fsum(phi) - total
    if n == 1:
        return AxiomReport(efficiency_residual, 0.0, 0.0, (total,))

    masks = np.arange(1, full, dtype=np.int64)
    nu = game(masks)
    sizes = popcount(masks)
    weights = np.array([kernel_weight(n, int(s)) for s in sizes])
    # phi_last = total - sum(others): regress (nu - b_last*total) on (b_i - b_last)
    bits = _mask_bits(masks, n).astype(float)
    A = bits[:, :-1] - bits[:, [-1]]
    b = nu - bits[:, -1] * total
    sw = np.sqrt(weights)
    head, *_ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    opt = np.append(head, total - head.sum())
    return AxiomReport(
        efficiency_residual=efficiency_residual,
        approximation_loss=_wls_loss(nu, masks, weights, phi, n),
        optimal_loss=_wls_loss(nu, masks, weights, opt, n),
        optimal_scores=tuple(float(v) for v in opt),
    )


@dataclass(frozen=True)
class CategoryRow:
    category: str
    ad_demand_attrib: float
    query_volume_attrib: float

    @property
    def total(self) -> float:
        return self.ad_demand_attrib + self.query_volume_attrib


@dataclass(frozen=True)
class CategoryRollup:
    rows: tuple[CategoryRow, ...]

    @property
    def grand_total(self) -> float:
        return math.fsum(r.ad_demand_attrib for r in self.rows) + math.fsum(r.query_volume_attrib for r in self.rows)

    def totals(self) -> dict[str, float]:
        return {r.category: r.total for r in self.rows}

    def top(self) -> str | None:
        """Category with the largest total; ties go to the earliest category."""
        if not self.rows:
            return None
        best = max(range(len(self.rows)), key=lambda i: (self.rows[i].total, -i))
        return self.rows[best].category


def rollup_by_category(result: AttributionResult, roles: Mapping[str, tuple[str, str]]) -> CategoryRollup:
    """Sum input scores per category, split by input type (``ad`` / ``qv``).

    For category-level results (delta baselines) every score is the total and
    is reported under the matching type column of the method.
    """
    if result.level == "category":
        column_type = "qv" if result.method == QV_DELTA else "ad"
        rows = [
            CategoryRow(c, s if column_type == "ad" else 0.0, s if column_type == "qv" else 0.0)
            for c, s in result.scores.items()
        ]
        return CategoryRollup(tuple(rows))
    acc: dict[str, dict[str, float]] = {}
    order = []
    for category, _ in roles.values():
        if category not in order:
            order.append(category)
    for name, score in result.scores.items():
        if name not in roles:
            raise UnmappedInput(f"input {name!r} has no category mapping")
        category, kind = roles[name]
        if kind not in ("ad", "qv"):
            raise UnmappedInput(f"input {name!r} has unknown type {kind!r}")
        acc.setdefault(category, {"ad": 0.0, "qv": 0.0})[kind] += score
    rows = tuple(CategoryRow(c, acc[c]["ad"], acc[c]["qv"]) for c in order if c in acc)
    return CategoryRollup(rows)
