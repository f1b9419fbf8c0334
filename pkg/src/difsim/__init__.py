"""Packet-level fat-tree simulator comparing DiFS flow scheduling against ECMP.

This module exposes the experiment pipeline graph and the run helpers.
"""

from difsim.config import ExperimentConfig
from difsim.graph import arun_experiment, graph, run_experiment, run_sweep
from difsim.metrics import MetricsReport
from difsim.scenarios import scenario_check

__all__ = [
    "ExperimentConfig",
    "MetricsReport",
    "arun_experiment",
    "graph",
    "run_experiment",
    "run_sweep",
    "scenario_check",
]
