"""Experiment harness: configuration, evaluation, benchmark tables, defense, sweeps and reports."""
from .benchmark import (BenchmarkError, adversarial_training, calibrate_epsilon, epsilon_sweep, get_star,
                        get_victim, resolve_epsilon, run_benchmark, run_defense)
from .config import ExperimentConfig, load_config
from .evaluate import evaluate_cell
from .metrics import MetricsRow, additive_rise, format_percent, relative_drop
from .report import report

__all__ = [
    "BenchmarkError", "ExperimentConfig", "MetricsRow", "additive_rise", "adversarial_training",
    "calibrate_epsilon", "epsilon_sweep", "evaluate_cell", "format_percent", "get_star", "get_victim",
    "load_config", "relative_drop", "report", "resolve_epsilon", "run_benchmark", "run_defense",
]
