"""Counterfactual Shapley attribution of changes in an aggregate metric."""

__version__ = "0.1.0"

from cfattrib.attribution import (
    AttributionResult,
    CategoryRollup,
    cf_shapley_exact,
    cf_shapley_mc,
    check_axioms,
    delta_baselines,
    do_shapley,
    fit_direct_model,
    rollup_by_category,
    shapley_direct,
)
from cfattrib.counterfactual import (
    CounterfactualQuery,
    CounterfactualSession,
    abduce,
    counterfactual,
)
from cfattrib.graph import (
    CausalGraph,
    NodeSpec,
    ad_matching_graph,
    build_graph,
    load_graph,
)
from cfattrib.models import SCMConfig, fit_scm, prediction_metrics
from cfattrib.outliers import OutlierReport, detect_outliers, fit_daily_model
from cfattrib.panel import PanelDataset, aggregate_daily_density
from cfattrib.pipeline import RunConfig, load_panel_csv, run_pipeline
from cfattrib.report import write_report
from cfattrib.simulation import (
    SimulationConfig,
    apply_intervention,
    generate_dataset,
    run_accuracy_experiment,
)

__all__ = [
    "AttributionResult",
    "CategoryRollup",
    "CausalGraph",
    "CounterfactualQuery",
    "CounterfactualSession",
    "NodeSpec",
    "OutlierReport",
    "PanelDataset",
    "RunConfig",
    "SCMConfig",
    "SimulationConfig",
    "abduce",
    "ad_matching_graph",
    "aggregate_daily_density",
    "apply_intervention",
    "build_graph",
    "cf_shapley_exact",
    "cf_shapley_mc",
    "check_axioms",
    "counterfactual",
    "delta_baselines",
    "detect_outliers",
    "do_shapley",
    "fit_daily_model",
    "fit_direct_model",
    "fit_scm",
    "generate_dataset",
    "load_graph",
    "load_panel_csv",
    "prediction_metrics",
    "rollup_by_category",
    "run_accuracy_experiment",
    "run_pipeline",
    "shapley_direct",
    "write_report",
]
