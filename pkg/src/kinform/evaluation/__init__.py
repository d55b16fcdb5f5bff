"""Family-disjoint cross-validation, accuracy reports and ablations."""

from .folds import FoldSplit, make_folds
from .harness import (
    ARM_NAMES,
    ARMS,
    AblationArm,
    AblationResult,
    AlphaSweep,
    CrossValidation,
    FoldRun,
    alpha_sweep,
    config_diff,
    cross_validate,
    evaluate,
    run_ablation,
    run_fold,
)
from .report import (
    ABLATION_ORDER,
    MAIN_ORDER,
    EvalReport,
    load_report,
    mean_report,
    render_table,
    reports_to_csv,
    reports_to_json,
    write_reports,
)

__all__ = [
    "ABLATION_ORDER",
    "ARMS",
    "ARM_NAMES",
    "AblationArm",
    "AblationResult",
    "AlphaSweep",
    "CrossValidation",
    "EvalReport",
    "FoldRun",
    "FoldSplit",
    "MAIN_ORDER",
    "alpha_sweep",
    "config_diff",
    "cross_validate",
    "evaluate",
    "load_report",
    "make_folds",
    "mean_report",
    "render_table",
    "reports_to_csv",
    "reports_to_json",
    "run_ablation",
    "run_fold",
    "write_reports",
]
