"""Panel CSV ingestion and the reproducible fit -> detect -> attribute pipeline."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from cfattrib.attribution import (
    CF_SHAPLEY_EXACT,
    CF_SHAPLEY_MC,
    DO_SHAPLEY,
    METHODS,
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
from cfattrib.errors import (
    GapInDays,
    InsufficientHistory,
    NonPositiveVolume,
    SchemaMismatch,
    StageError,
)
from cfattrib.graph import ad_matching_graph, input_roles, load_graph
from cfattrib.models import SCMConfig, fit_scm
from cfattrib.outliers import detect_outliers, fit_daily_model
from cfattrib.panel import PanelDataset
from cfattrib.report import write_json, write_report
from cfattrib.simulation import (
    BURN_IN,
    InterventionSpec,
    SimulationConfig,
    apply_intervention,
    simulate,
)

PANEL_COLUMNS = ("day", "category", "query_volume", "ad_demand", "density")
REFERENCE_LAGS = {"lag7": 7, "lag14": 14}


def read_panel_csv(path: str | Path) -> tuple[PanelDataset, int]:
    """Parse a long-format panel CSV; returns the panel and its first day label.

    Categories keep their order of first appearance. Every category must
    cover the same contiguous run of days.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaMismatch(f"{path}: empty file, expected header {','.join(PANEL_COLUMNS)}")
        header = [h.strip() for h in header]
        if sorted(header) != sorted(PANEL_COLUMNS) or len(header) != len(PANEL_COLUMNS):
            missing = sorted(set(PANEL_COLUMNS) - set(header))
            extra = sorted(set(header) - set(PANEL_COLUMNS))
            raise SchemaMismatch(f"{path}: header {header} (missing {missing}, unexpected {extra})")
        col = {name: header.index(name) for name in PANEL_COLUMNS}
        records: dict[str, dict[int, tuple[float, float, float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise SchemaMismatch(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                day = int(row[col["day"]])
            except ValueError:
                raise SchemaMismatch(f"{path}: row {lineno} column 'day': {row[col['day']]!r} is not an integer") from None
            values = []
            for name in ("query_volume", "ad_demand", "density"):
                try:
                    values.append(float(row[col[name]]))
                except ValueError:
                    raise SchemaMismatch(
                        f"{path}: row {lineno} column {name!r}: {row[col[name]]!r} is not a number"
                    ) from None
            if not all(np.isfinite(values)):
                raise SchemaMismatch(f"{path}: row {lineno} holds a non-finite value")
            category = row[col["category"]].strip()
            if values[0] <= 0:
                raise NonPositiveVolume(f"{path}: row {lineno}: query_volume {values[0]} for {category!r} on day {day}")
            per_cat = records.setdefault(category, {})
            if day in per_cat:
                raise SchemaMismatch(f"{path}: row {lineno}: duplicate day {day} for category {category!r}")
            per_cat[day] = tuple(values)
    if not records:
        raise SchemaMismatch(f"{path}: no data rows")
    first = min(min(d) for d in records.values())
    last = max(max(d) for d in records.values())
    for category, per_cat in records.items():
        for day in range(first, last + 1):
            if day not in per_cat:
                raise GapInDays(f"{path}: category {category!r} has no row for day {day}")
    cats = list(records)
    arr = np.array([[records[c][d] for d in range(first, last + 1)] for c in cats])
    panel = PanelDataset(tuple(cats), qv=arr[:, :, 0], ad=arr[:, :, 1], den=arr[:, :, 2])
    return panel, first


def load_panel_csv(path: str | Path) -> PanelDataset:
    return read_panel_csv(path)[0]


def save_panel_csv(panel: PanelDataset, path: str | Path, first_day: int = 0) -> Path:
    """Write a panel in long format; floats use shortest round-trip form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PANEL_COLUMNS)
        for t in range(panel.T):
            for i, c in enumerate(panel.categories):
                writer.writerow(
                    [first_day + t, c, repr(float(panel.qv[i, t])), repr(float(panel.ad[i, t])), repr(float(panel.den[i, t]))]
                )
    return path


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run depends on; serialized verbatim into the manifest.

    ``days`` are day labels of the panel (``None`` means the last day).
    ``reference`` is ``lag7``, ``lag14`` or an explicit earlier day label.
    Without ``data_path`` the panel is simulated from ``simulation``.
    """

    data_path: str | None = None
    graph_path: str | None = None
    days: tuple[int, ...] | None = None
    reference: str | int = "lag7"
    regressor: str = "linear"
    regressor_params: Mapping[str, Any] = field(default_factory=dict)
    methods: tuple[str, ...] = (CF_SHAPLEY_MC,)
    M: int = 1000
    seed: int = 0
    out: str = "cfattrib-out"
    level: float = 0.95
    detect: bool = True
    simulation: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "regressor_params", dict(self.regressor_params))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.days is not None:
            object.__setattr__(self, "days", tuple(int(d) for d in self.days))
        if self.seed is None:
            raise ValueError("seed must be set")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if isinstance(self.reference, str) and self.reference not in REFERENCE_LAGS:
            try:
                object.__setattr__(self, "reference", int(self.reference))
            except ValueError:
                raise ValueError(f"reference must be lag7, lag14 or a day, got {self.reference!r}") from None
        if isinstance(self.reference, int) and self.days is not None:
            late = [d for d in self.days if self.reference >= d]
            if late:
                raise ValueError(f"explicit reference day {self.reference} must precede attributed days {late}")
        if self.data_path is None and self.simulation is None:
            raise ValueError("either data_path or simulation must be given")
        if self.M < 1:
            raise ValueError("M must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["methods"] = list(self.methods)
        doc["days"] = None if self.days is None else list(self.days)
        doc["simulation"] = None if self.simulation is None else dict(self.simulation)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> RunConfig:
        doc = dict(doc)
        if doc.get("days") is not None:
            doc["days"] = tuple(doc["days"])
        doc["methods"] = tuple(doc.get("methods", (CF_SHAPLEY_MC,)))
        return cls(**doc)


def reference_day(day: int, reference: str | int) -> int:
    if isinstance(reference, str):
        return day - REFERENCE_LAGS[reference]
    if reference >= day:
        raise ValueError(f"reference day {reference} must precede day {day}")
    return reference


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict[str, str]:
    import scipy
    import sklearn
    import statsmodels

    from cfattrib import __version__

    return {
        "cfattrib": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "statsmodels": statsmodels.__version__,
    }


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, exc) from exc
        return False


def simulated_panel(spec: Mapping[str, Any]) -> tuple[PanelDataset, dict[str, Any]]:
    """Panel from a simulation block ``{k, T, sigma, seed, config}``."""
    spec = dict(spec)
    config = spec.pop("config", None)
    sim = simulate(SimulationConfig(**spec))
    info: dict[str, Any] = {"truncations": sim.truncations}
    if config:
        sim, truth = apply_intervention(sim, InterventionSpec(config=config))
        rec = sim.intervention
        info.update(
            config=config, target_day=rec.target_day, first=rec.first, second=rec.second, ground_truth=truth
        )
    return sim.panel, info


def execute_pipeline(config: RunConfig) -> dict[str, Path]:
    """Run every stage, writing artifacts under ``config.out``; raises :class:`StageError`."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}
    inputs: dict[str, Any] = {}

    with _Stage("load"):
        if config.data_path is not None:
            panel, first_day = read_panel_csv(config.data_path)
            inputs["data_sha256"] = _sha256(Path(config.data_path))
        else:
            panel, info = simulated_panel(config.simulation)
            first_day = 0
            artifacts["panel"] = save_panel_csv(panel, out / "panel.csv")
            artifacts["simulation"] = write_json(info, out / "simulation.json")
        if config.graph_path is not None:
            graph = load_graph(config.graph_path)
            inputs["graph_sha256"] = _sha256(Path(config.graph_path))
        else:
            graph = ad_matching_graph(panel.categories)

    with _Stage("resolve"):
        labels = config.days if config.days is not None else (first_day + panel.T - 1,)
        pairs = []
        for label in labels:
            t = label - first_day
            if not 0 <= t < panel.T:
                raise InsufficientHistory(f"day {label} is outside the panel days [{first_day}, {first_day + panel.T - 1}]")
            t_ref = reference_day(label, config.reference) - first_day
            if t_ref < graph.max_lag:
                raise InsufficientHistory(
                    f"reference day {t_ref + first_day} for day {label} lacks the {graph.max_lag}-day lag history"
                )
            pairs.append((t, t_ref))
        first_attributed = min(t for t, _ in pairs)

    with _Stage("fit"):
        scm = fit_scm(
            graph,
            panel,
            SCMConfig(
                regressor=config.regressor,
                regressor_params=config.regressor_params,
                train_range=(graph.max_lag, first_attributed),
            ),
        )
        artifacts["model_summary"] = write_json(scm.summary(), out / "model_summary.json")

    if config.detect:
        with _Stage("detect"):
            daily = fit_daily_model(panel, train_range=(BURN_IN, first_attributed))
            eval_days = range(daily.validation_days[1], panel.T)
            report = detect_outliers(daily, panel, eval_days, level=config.level)
            artifacts["outliers_csv"] = write_report(report, "csv", out / "outliers.csv")
            artifacts["outliers_json"] = write_report(report, "json", out / "outliers.json")

    with _Stage("attribute"):
        roles = input_roles(panel.categories)
        direct = None
        for t, t_ref in pairs:
            session = None
            label = t + first_day
            for method in config.methods:
                if method in (CF_SHAPLEY_MC, CF_SHAPLEY_EXACT):
                    session = session or CounterfactualSession(scm, panel, t, t_ref)
                    if method == CF_SHAPLEY_MC:
                        result = cf_shapley_mc(session, M=config.M, seed=config.seed)
                    else:
                        result = cf_shapley_exact(session)
                elif method in (SHAPLEY_DIRECT, DO_SHAPLEY):
                    direct = direct or fit_direct_model(panel, (BURN_IN, first_attributed), config.regressor)
                    x = panel.inputs_at(t)
                    if method == SHAPLEY_DIRECT:
                        result = shapley_direct(direct, x, panel.inputs_at(t_ref), M=config.M, seed=config.seed)
                    else:
                        result = do_shapley(direct, x, M=config.M, seed=config.seed)
                else:
                    result = delta_baselines(panel, t, t_ref)[method]
                stem = f"attribution_day{label}_{method}"
                artifacts[f"{stem}_json"] = write_report(result, "json", out / f"{stem}.json")
                artifacts[f"{stem}_csv"] = write_report(result, "csv", out / f"{stem}.csv")
                if result.level == "input" and all(name in roles for name in result.scores):
                    rollup = rollup_by_category(result, roles)
                    artifacts[f"rollup_day{label}_{method}"] = write_report(
                        rollup, "csv", out / f"rollup_day{label}_{method}.csv"
                    )

    run_config = config.to_dict()
    del run_config["out"]  # where artifacts land is not an input of the run
    manifest = {
        "config": run_config,
        "inputs": inputs,
        "versions": _versions(),
        "artifacts": {key: {"path": p.name, "sha256": _sha256(p)} for key, p in sorted(artifacts.items())},
    }
    artifacts["manifest"] = write_json(manifest, out / "manifest.json")
    return artifacts


def run_pipeline(config: RunConfig) -> int:
    """Exit status of :func:`execute_pipeline`: 0 on success, 1 on a stage failure."""
    try:
        execute_pipeline(config)
    except StageError as exc:
        print(f"cfattrib: {exc}", file=sys.stderr)
        return 1
    return 0


def load_manifest_config(path: str | Path, out: str | None = None) -> RunConfig:
    """Config recorded in a manifest; artifacts go next to it unless ``out`` is given."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = dict(doc["config"])
    cfg["out"] = out if out is not None else str(Path(path).parent)
    return RunConfig.from_dict(cfg)
