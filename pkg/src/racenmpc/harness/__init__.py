"""Closed-loop runs, metrics, exports and synthetic identification data."""

from .config import BUILTIN_TRACKS, ConfigError, ScenarioConfig, racing_solver_config
from .datagen import SUITES, generate_ident_data, suite_inputs
from .export import (
    METRICS_SCHEMA, SCHEMA_VERSION, ExportError, export_results, load_result, load_series,
    save_result, validate_metrics,
)
from .metrics import Metrics, Violations, compute_metrics, solve_time_histogram, speed_by_curvature
from .sim import SimResult, detect_laps, run_closed_loop, start_line

__all__ = [
    "BUILTIN_TRACKS", "ConfigError", "ExportError", "METRICS_SCHEMA", "Metrics", "SCHEMA_VERSION",
    "SUITES", "ScenarioConfig", "SimResult", "Violations", "compute_metrics", "detect_laps",
    "export_results", "generate_ident_data", "load_result", "load_series", "racing_solver_config",
    "run_closed_loop", "save_result", "solve_time_histogram", "speed_by_curvature", "start_line",
    "suite_inputs", "validate_metrics",
]
