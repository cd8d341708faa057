"""Experiment harness: configuration, metrics files, runs and the CLI."""

from .config import RunConfig, load_config
from .experiments import ablation_suite, bench_allreduce, resume_experiment, run_experiment
from .metrics import MetricsRecord, MetricsWriter, export_csv, read_metrics

__all__ = ["MetricsRecord", "MetricsWriter", "RunConfig", "ablation_suite", "bench_allreduce",
           "export_csv", "load_config", "read_metrics", "resume_experiment", "run_experiment"]
