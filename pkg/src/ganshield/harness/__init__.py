"""Experiment configuration, orchestration, reporting and the command line."""
from .config import ConfigError, ExperimentConfig, sub_seed
from .experiments import (
    run_clean,
    run_detect,
    run_gan_quality_sweep,
    run_table1,
    run_table2,
    run_violin_export,
)
from .reports import BUILD_ID, ExperimentReport, parse_csv, read_csv

__all__ = [
    "BUILD_ID",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "parse_csv",
    "read_csv",
    "run_clean",
    "run_detect",
    "run_gan_quality_sweep",
    "run_table1",
    "run_table2",
    "run_violin_export",
    "sub_seed",
]
