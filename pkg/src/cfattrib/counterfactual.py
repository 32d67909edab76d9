"""Abduction-action-prediction counterfactuals on a fitted SCM.

For an observed day ``t`` the residual of every learned node is inferred once
(abduction). A counterfactual then sets a subset of input nodes to their values
on the reference day ``t_ref`` (action) and recomputes the downstream nodes in
topological order, adding the day-``t`` residuals back (prediction). Lagged
features stay at their observed day-``t`` values: the intervention is a
same-day one.

Assignments are encoded as bitmasks over :attr:`CounterfactualSession.inputs`;
bit ``i`` set means input ``i`` takes its reference value.
"""

from __future__ import annotations

from collections.abc import Collection, Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from cfattrib.errors import DimensionMismatch, InsufficientHistory, InvalidNode
from cfattrib.graph import ANALYTIC, INPUT, LEARNED
from cfattrib.models import FittedSCM, exact_residual, with_analytic_columns
from cfattrib.panel import Table, as_table, column

OBSERVED = "observed"
REFERENCE = "reference"


@dataclass(frozen=True)
class AbductionRecord:
    t: int
    residuals: Mapping[str, float]


@dataclass(frozen=True)
class CounterfactualQuery:
    t: int
    t_ref: int
    assignment: Mapping[str, str]

    def reference_set(self) -> frozenset[str]:
        return frozenset(name for name, how in self.assignment.items() if how == REFERENCE)


def abduce(scm: FittedSCM, data, t: int) -> AbductionRecord:
    """Residual ``observed - predicted`` of every learned node on day ``t``."""
    table = with_analytic_columns(scm.graph, as_table(data))
    residuals = {}
    for node, model in scm.models.items():
        if t < model.layout.max_lag:
            raise InsufficientHistory(f"day {t} lacks the {model.layout.max_lag}-day history of {node!r}")
        x = model.layout.design(table, [t])
        pred = model.predict_rows(x)
        residuals[node] = float(exact_residual(column(table, node)[t : t + 1], pred)[0])
    return AbductionRecord(t=t, residuals=residuals)


class CounterfactualSession:
    """All counterfactuals for one (observed day, reference day) pair.

    Residuals are abduced once and reused for every assignment. Values are
    memoized by assignment bitmask. A session is not thread-safe: confine each
    one to a single worker and build separate sessions for parallel days.
    """

    def __init__(self, scm: FittedSCM, data, t: int, t_ref: int, inputs: Sequence[str] | None = None):
        self.scm = scm
        self.graph = scm.graph
        self.table: Table = with_analytic_columns(self.graph, as_table(data))
        self.t = int(t)
        self.t_ref = int(t_ref)
        max_lag = self.graph.max_lag
        for day, label in ((self.t, "observed"), (self.t_ref, "reference")):
            if day < max_lag:
                raise InsufficientHistory(f"{label} day {day} lacks the {max_lag}-day lag history")
        n_days = len(next(iter(self.table.values())))
        if max(self.t, self.t_ref) >= n_days:
            raise InsufficientHistory(f"day {max(self.t, self.t_ref)} is past the last day {n_days - 1}")

        self.inputs: tuple[str, ...] = tuple(inputs) if inputs is not None else self.graph.inputs
        for name in self.inputs:
            if name not in self.graph.nodes or self.graph[name].kind != INPUT:
                raise InvalidNode(f"{name!r} is not an input node of the graph")
        self._bit = {name: i for i, name in enumerate(self.inputs)}
        self.abduction = abduce(scm, self.table, self.t)
        self.observed = self._observed_values()
        self.reference = {name: float(column(self.table, name)[self.t_ref]) for name in self.inputs}
        self._context = {
            node: model.layout.context(self.table, np.array([self.t])) for node, model in scm.models.items()
        }
        self._cache: dict[int, float] = {}
        self.evaluations = 0
        self.clamp_events = 0

    @property
    def n_inputs(self) -> int:
        return len(self.inputs)

    @property
    def full_mask(self) -> int:
        return (1 << self.n_inputs) - 1

    def _observed_values(self) -> dict[str, float]:
        values: dict[str, float] = {}
        for node in self.graph.order:
            spec = self.graph[node]
            if node in self.table:
                values[node] = float(self.table[node][self.t])
            elif spec.kind == ANALYTIC:
                parents = np.array([[values[p] for p in spec.parents]])
                values[node] = float(spec.evaluate(parents)[0])
            else:
                column(self.table, node)
        return values

    def mask_of(self, reference_inputs: Iterable[str] | Mapping[str, str]) -> int:
        if isinstance(reference_inputs, Mapping):
            unknown = set(reference_inputs) - set(self._bit)
            if unknown:
                raise InvalidNode(f"assignment names non-player inputs {sorted(unknown)}")
            bad = {v for v in reference_inputs.values() if v not in (OBSERVED, REFERENCE)}
            if bad:
                raise ValueError(f"assignment values must be 'observed' or 'reference', got {sorted(bad)}")
            reference_inputs = [n for n, how in reference_inputs.items() if how == REFERENCE]
        mask = 0
        for name in reference_inputs:
            try:
                mask |= 1 << self._bit[name]
            except KeyError:
                raise InvalidNode(f"{name!r} is not a player input of this session") from None
        return mask

    def evaluate_masks(self, masks: np.ndarray) -> np.ndarray:
        """Output value for each bitmask in ``masks``; no caching."""
        masks = np.asarray(masks, dtype=np.int64).reshape(-1)
        batch = masks.size
        self.evaluations += batch
        values: dict[str, np.ndarray] = {}
        changed: dict[str, np.ndarray] = {}
        for node in self.graph.order:
            spec = self.graph[node]
            obs = self.observed[node]
            if spec.kind == INPUT:
                if node in self._bit:
                    use_ref = ((masks >> self._bit[node]) & 1).astype(bool)
                    ref = self.reference[node]
                    values[node] = np.where(use_ref, ref, obs)
                    changed[node] = use_ref & (ref != obs)
                else:
                    values[node] = np.full(batch, obs)
                    changed[node] = np.zeros(batch, dtype=bool)
                continue

            moved = np.zeros(batch, dtype=bool)
            for parent in spec.parents:
                moved |= changed[parent]
            out = np.full(batch, obs)
            if moved.any():
                rows = np.flatnonzero(moved)
                if spec.kind == LEARNED:
                    model = self.scm.models[node]
                    parent_vals = {p: values[p][rows] for p in spec.parents}
                    X = model.layout.assemble(parent_vals, self._context[node])
                    new = model.predict_rows(X) + self.abduction.residuals[node]
                    if self.scm.config.clamp_at_zero:
                        negative = new < 0
                        self.clamp_events += int(negative.sum())
                        new = np.where(negative, 0.0, new)
                else:
                    P = np.column_stack([values[p][rows] for p in spec.parents])
                    new = spec.evaluate(P)
                out[rows] = new
                # a recomputed value equal to the observed one does not propagate a change
                moved[rows] = new != obs
            values[node] = out
            changed[node] = moved
        return values[self.graph.output]

    def values(self, masks: Iterable[int]) -> np.ndarray:
        """Memoized output values for a collection of bitmasks."""
        masks = np.asarray(list(masks) if not isinstance(masks, np.ndarray) else masks, dtype=np.int64)
        if masks.size == 0:
            return np.zeros(0)
        if masks.min() < 0 or masks.max() > self.full_mask:
            raise DimensionMismatch(f"bitmask outside [0, {self.full_mask}]")
        unique = np.unique(masks)
        missing = np.array([m for m in unique.tolist() if m not in self._cache], dtype=np.int64)
        if missing.size:
            for m, v in zip(missing.tolist(), self.evaluate_masks(missing).tolist()):
                self._cache[m] = v
        return np.array([self._cache[m] for m in masks.tolist()])

    def value(self, mask: int) -> float:
        return float(self.values([mask])[0])

    @property
    def cache_size(self) -> int:
        return len(self._cache)

    @property
    def observed_output(self) -> float:
        return self.observed[self.graph.output]

    def counterfactual(self, reference_inputs: Collection[str] | Mapping[str, str]) -> float:
        return self.value(self.mask_of(reference_inputs))


def _check_query(scm: FittedSCM, query: CounterfactualQuery) -> None:
    inputs = set(scm.graph.inputs)
    named = set(query.assignment)
    if named != inputs:
        missing, extra = sorted(inputs - named), sorted(named - inputs)
        raise InvalidNode(f"assignment must cover every input exactly once (missing {missing}, extra {extra})")


def counterfactual(scm: FittedSCM, data, query: CounterfactualQuery) -> float:
    """Output value on day ``query.t`` had the ``reference`` inputs taken their day-``t_ref`` values."""
    _check_query(scm, query)
    session = CounterfactualSession(scm, data, query.t, query.t_ref)
    return session.counterfactual(query.assignment)


def counterfactual_batch(
    scm: FittedSCM,
    data,
    t: int,
    t_ref: int,
    assignments: Sequence[Collection[str] | Mapping[str, str]],
    session: CounterfactualSession | None = None,
) -> list[float]:
    """Counterfactual outputs for many assignments sharing one abduction and cache."""
    if session is None:
        session = CounterfactualSession(scm, data, t, t_ref)
    elif (session.t, session.t_ref) != (t, t_ref):
        raise ValueError("session was built for a different (t, t_ref) pair")
    masks = [session.mask_of(a) for a in assignments]
    return session.values(masks).tolist()

