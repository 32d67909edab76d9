"""Deterministic JSON / CSV serialization of results.

Every report is a fixed column list plus rows; JSON adds a header block.
Floats carry 12 significant digits in both formats, so equal results give
equal bytes and the two formats agree value for value.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from cfattrib.attribution import AttributionResult, CategoryRollup
from cfattrib.models import PredictionMetrics
from cfattrib.outliers import OutlierReport
from cfattrib.simulation import AccuracyRow

FORMATS = ("json", "csv")
ACCURACY_COLUMNS = ["method", "config", "sigma", "accuracy", "ci_low", "ci_high", "trials", "correct", "ties"]
ROLLUP_COLUMNS = ["category", "ad_attrib", "qv_attrib", "total"]
OUTLIER_COLUMNS = ["day", "prediction", "low", "high", "observed", "flagged"]
METRIC_COLUMNS = ["model", "mean_ape", "median_ape", "smape", "n_rows"]


def round12(x: float) -> float | None:
    """Round to 12 significant digits; NaN becomes None (JSON null)."""
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return x
    return float(f"{x:.12g}")


def _scalar(value: Any) -> Any:
    """Numpy scalars to their Python counterparts."""
    if hasattr(value, "dtype") and getattr(value, "ndim", 1) == 0:
        return value.item()
    return value


def _clean(value: Any) -> Any:
    value = _scalar(value)
    if isinstance(value, bool) or value is None or isinstance(value, (str, int)):
        return value
    if isinstance(value, float):
        return round12(value)
    if isinstance(value, Mapping):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return str(value)


def tabulate(result: Any) -> tuple[dict[str, Any], list[str], list[list[Any]]]:
    """Split a result into (header fields, column names, rows)."""
    if isinstance(result, AttributionResult):
        header = {
            "kind": "attribution",
            "method": result.method,
            "level": result.level,
            "t": result.t,
            "t_ref": result.t_ref,
            "seed": result.seed,
            "M": result.M,
            "efficiency_target": result.efficiency_target,
            "efficiency_residual": result.efficiency_residual,
            "clamp_events": result.clamp_events,
            "n_evaluations": result.n_evaluations,
            "metadata": dict(sorted(result.metadata.items())),
        }
        se = result.mc_std_error or {}
        rows = [[name, score, se.get(name)] for name, score in result.scores.items()]
        return header, ["name", "score", "std_error"], rows
    if isinstance(result, CategoryRollup):
        rows = [[r.category, r.ad_demand_attrib, r.query_volume_attrib, r.total] for r in result.rows]
        return {"kind": "category_rollup", "grand_total": result.grand_total}, list(ROLLUP_COLUMNS), rows
    if isinstance(result, OutlierReport):
        rows = [[r.day, r.prediction, r.low, r.high, r.observed, r.flagged] for r in result.rows]
        return {"kind": "outliers", "level": result.level, "flagged_days": result.flagged_days}, list(OUTLIER_COLUMNS), rows
    if isinstance(result, Sequence) and result and all(isinstance(r, AccuracyRow) for r in result):
        rows = [
            [r.method, r.config, r.sigma, r.accuracy, r.ci_low, r.ci_high, r.trials, r.correct, r.ties] for r in result
        ]
        return {"kind": "accuracy"}, list(ACCURACY_COLUMNS), rows
    if isinstance(result, Mapping) and result and all(isinstance(v, PredictionMetrics) for v in result.values()):
        rows = [[name, m.mean_ape, m.median_ape, m.smape, m.n_rows] for name, m in result.items()]
        return {"kind": "model_comparison"}, list(METRIC_COLUMNS), rows
    raise TypeError(f"no report layout for {type(result).__name__}")


def _csv_cell(value: Any) -> str:
    value = _scalar(value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        v = round12(value)
        return "nan" if v is None else f"{v:.12g}"
    return str(value)


def render(result: Any, fmt: str) -> str:
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    header, columns, rows = tabulate(result)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows([[_csv_cell(v) for v in row] for row in rows])
        return buf.getvalue()
    doc = dict(_clean(header))
    doc["columns"] = columns
    doc["rows"] = [dict(zip(columns, _clean(row))) for row in rows]
    return json.dumps(doc, indent=2, allow_nan=True) + "\n"


def write_report(result: Any, fmt: str, path: str | Path) -> Path:
    """Write ``result`` as JSON or CSV; identical results give identical bytes."""
    path = Path(path)
    text = render(result, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def write_json(doc: Mapping[str, Any], path: str | Path) -> Path:
    """Plain JSON document (summaries, manifests) with rounded floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(json.dumps(_clean(doc), indent=2) + "\n")
    return path
