"""Metric-computation DAG: node specs, validation, evaluation order, JSON I/O.

Nodes come in three kinds:

* ``input`` -- exogenous system inputs (no parents, no lags). These are the
  players that attribution distributes credit over.
* ``learned`` -- nodes whose structural equation is fit from data over their
  parents and their own lagged values.
* ``analytic`` -- nodes with a known closed form, looked up by key in
  :data:`ANALYTIC_FUNCTIONS`.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any

import numpy as np

from cfattrib.errors import CycleDetected, DanglingParent, InvalidNode, MultipleSinks

INPUT = "input"
LEARNED = "learned"
ANALYTIC = "analytic"
NODE_KINDS = (INPUT, LEARNED, ANALYTIC)

# An analytic function maps parent values of shape (batch, n_parents), columns
# ordered like NodeSpec.parents, to an output of shape (batch,).
AnalyticFn = Callable[..., np.ndarray]

ANALYTIC_FUNCTIONS: dict[str, AnalyticFn] = {}


def register_analytic(key: str) -> Callable[[AnalyticFn], AnalyticFn]:
    def deco(fn: AnalyticFn) -> AnalyticFn:
        ANALYTIC_FUNCTIONS[key] = fn
        return fn

    return deco


@register_analytic("qv_weighted_mean")
def _qv_weighted_mean(values: np.ndarray) -> np.ndarray:
    # parents: den[c1..ck] followed by qv[c1..ck]
    k = values.shape[1] // 2
    den, qv = values[:, :k], values[:, k:]
    return (den * qv).sum(axis=1) / qv.sum(axis=1)


@register_analytic("weighted_sum")
def _weighted_sum(values: np.ndarray, weights: Sequence[float] | None = None, bias: float = 0.0) -> np.ndarray:
    if weights is None:
        return values.sum(axis=1) + bias
    return values @ np.asarray(weights, dtype=float) + bias


@register_analytic("threshold")
def _threshold(values: np.ndarray, cutoff: float = 0.0) -> np.ndarray:
    # indicator I[x >= cutoff] of the single parent
    return (values[:, 0] >= cutoff).astype(float)


@register_analytic("product")
def _product(values: np.ndarray) -> np.ndarray:
    return values.prod(axis=1)


@register_analytic("maximum")
def _maximum(values: np.ndarray) -> np.ndarray:
    return values.max(axis=1)


@dataclass(frozen=True)
class NodeSpec:
    name: str
    kind: str
    parents: tuple[str, ...] = ()
    lags: tuple[int, ...] = ()
    function: str | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "parents", tuple(self.parents))
        object.__setattr__(self, "lags", tuple(int(lag) for lag in self.lags))
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    @property
    def max_lag(self) -> int:
        return max(self.lags, default=0)

    def evaluate(self, values: np.ndarray) -> np.ndarray:
        """Evaluate an analytic node on a (batch, n_parents) array."""
        if self.kind != ANALYTIC:
            raise InvalidNode(f"node {self.name!r} is {self.kind}, not analytic")
        return ANALYTIC_FUNCTIONS[self.function](values, **self.params)


def _validate_spec(spec: NodeSpec) -> None:
    if not spec.name:
        raise InvalidNode("node name must be non-empty")
    if spec.kind not in NODE_KINDS:
        raise InvalidNode(f"node {spec.name!r}: unknown kind {spec.kind!r}")
    if spec.kind == INPUT and (spec.parents or spec.lags):
        raise InvalidNode(f"input node {spec.name!r} cannot have parents or lags")
    if spec.kind == ANALYTIC:
        if spec.function not in ANALYTIC_FUNCTIONS:
            raise InvalidNode(f"analytic node {spec.name!r}: unregistered function {spec.function!r}")
        if spec.lags:
            raise InvalidNode(f"analytic node {spec.name!r} cannot have lags")
        if not spec.parents:
            raise InvalidNode(f"analytic node {spec.name!r} needs at least one parent")
    if spec.kind == LEARNED:
        if len(set(spec.lags)) != len(spec.lags):
            raise InvalidNode(f"node {spec.name!r}: duplicate lags {spec.lags}")
        if any(lag <= 0 for lag in spec.lags):
            raise InvalidNode(f"node {spec.name!r}: lags must be strictly positive, got {spec.lags}")
    if len(set(spec.parents)) != len(spec.parents):
        raise InvalidNode(f"node {spec.name!r}: duplicate parents")


@dataclass(frozen=True)
class CausalGraph:
    """A validated, immutable DAG. Build it with :func:`build_graph`."""

    nodes: Mapping[str, NodeSpec]
    output: str
    order: tuple[str, ...]

    @property
    def inputs(self) -> tuple[str, ...]:
        return tuple(n for n in self.order if self.nodes[n].kind == INPUT)

    @property
    def learned(self) -> tuple[str, ...]:
        return tuple(n for n in self.order if self.nodes[n].kind == LEARNED)

    @property
    def analytic(self) -> tuple[str, ...]:
        return tuple(n for n in self.order if self.nodes[n].kind == ANALYTIC)

    @property
    def max_lag(self) -> int:
        return max((spec.max_lag for spec in self.nodes.values()), default=0)

    def __getitem__(self, name: str) -> NodeSpec:
        return self.nodes[name]

    def children(self, name: str) -> tuple[str, ...]:
        return tuple(n for n in self.order if name in self.nodes[n].parents)

    def descendants(self, names: Iterable[str]) -> set[str]:
        found: set[str] = set()
        frontier = list(names)
        while frontier:
            for child in self.children(frontier.pop()):
                if child not in found:
                    found.add(child)
                    frontier.append(child)
        return found


def _levels(nodes: Mapping[str, NodeSpec]) -> dict[str, int]:
    """Longest-path depth of each node from the roots; raises on cycles."""
    indegree = {name: len(spec.parents) for name, spec in nodes.items()}
    children: dict[str, list[str]] = {name: [] for name in nodes}
    for name, spec in nodes.items():
        for parent in spec.parents:
            children[parent].append(name)
    level = {name: 0 for name in nodes}
    ready = sorted(name for name, deg in indegree.items() if deg == 0)
    seen = 0
    while ready:
        name = ready.pop()
        seen += 1
        for child in children[name]:
            level[child] = max(level[child], level[name] + 1)
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
    if seen != len(nodes):
        stuck = sorted(name for name, deg in indegree.items() if deg > 0)
        raise CycleDetected(f"graph has a cycle through {stuck}")
    return level


def build_graph(specs: Sequence[NodeSpec], output: str) -> CausalGraph:
    names = [spec.name for spec in specs]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise InvalidNode(f"duplicate node names: {dupes}")
    nodes = {spec.name: spec for spec in specs}
    for spec in specs:
        _validate_spec(spec)
        for parent in spec.parents:
            if parent not in nodes:
                raise DanglingParent(f"node {spec.name!r} references unknown parent {parent!r}")
    if output not in nodes:
        raise DanglingParent(f"output node {output!r} is not in the graph")

    level = _levels(nodes)
    has_child = {parent for spec in specs for parent in spec.parents}
    sinks = sorted(n for n in nodes if n not in has_child)
    if sinks != [output]:
        raise MultipleSinks(f"graph must have exactly one sink {output!r}, found {sinks}")
    order = tuple(sorted(nodes, key=lambda n: (level[n], n)))
    return CausalGraph(nodes=MappingProxyType(nodes), output=output, order=order)


def topological_order(graph: CausalGraph) -> list[str]:
    """Nodes grouped by depth, names sorted within a depth.

    Grouping by depth (rather than plain Kahn with a name heap) keeps every
    input ahead of every derived node, which reads naturally in reports.
    """
    return list(graph.order)


def graph_to_dict(graph: CausalGraph) -> dict[str, Any]:
    nodes = []
    for name in graph.order:
        spec = graph.nodes[name]
        entry: dict[str, Any] = {
            "name": spec.name,
            "kind": spec.kind,
            "parents": list(spec.parents),
            "lags": list(spec.lags),
        }
        if spec.function is not None:
            entry["function"] = spec.function
        if spec.params:
            entry["params"] = dict(spec.params)
        nodes.append(entry)
    return {"nodes": nodes, "output": graph.output}


def graph_from_dict(doc: Mapping[str, Any]) -> CausalGraph:
    try:
        specs = [
            NodeSpec(
                name=entry["name"],
                kind=entry["kind"],
                parents=tuple(entry.get("parents", ())),
                lags=tuple(entry.get("lags", ())),
                function=entry.get("function"),
                params=entry.get("params", {}),
            )
            for entry in doc["nodes"]
        ]
        output = doc["output"]
    except KeyError as exc:
        raise InvalidNode(f"graph document is missing field {exc}") from None
    return build_graph(specs, output)


def load_graph(path: str | Path) -> CausalGraph:
    with open(path, encoding="utf-8") as fh:
        return graph_from_dict(json.load(fh))


def save_graph(graph: CausalGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(graph), fh, indent=2)
        fh.write("\n")


def ad_node(category: str) -> str:
    return f"ad[{category}]"


def qv_node(category: str) -> str:
    return f"qv[{category}]"


def den_node(category: str) -> str:
    return f"den[{category}]"


DAILY_DENSITY = "y"


def ad_matching_graph(categories: Sequence[str], lags: Sequence[int] = (1, 7, 14)) -> CausalGraph:
    """The ad-matching graph: {ad, qv} per category -> category density -> daily density."""
    specs: list[NodeSpec] = []
    for c in categories:
        specs.append(NodeSpec(ad_node(c), INPUT))
        specs.append(NodeSpec(qv_node(c), INPUT))
        specs.append(NodeSpec(den_node(c), LEARNED, parents=(ad_node(c), qv_node(c)), lags=tuple(lags)))
    parents = tuple(den_node(c) for c in categories) + tuple(qv_node(c) for c in categories)
    specs.append(NodeSpec(DAILY_DENSITY, ANALYTIC, parents=parents, function="qv_weighted_mean"))
    return build_graph(specs, DAILY_DENSITY)


def input_roles(categories: Sequence[str]) -> dict[str, tuple[str, str]]:
    """Map each ad-matching input node to its (category, type) pair."""
    roles = {}
    for c in categories:
        roles[ad_node(c)] = (c, "ad")
        roles[qv_node(c)] = (c, "qv")
    return roles
