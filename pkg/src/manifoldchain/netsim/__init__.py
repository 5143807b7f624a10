"""Discrete-event network simulator for sharded multichain deployments."""

from .config import ConfigInvalid, DelayModel, NodeSpec, Resolved, Scenario, Workload, resolve
from .metrics import MetricsReport
from .sim import Simulation, SynchronyViolation, run

__all__ = ["ConfigInvalid", "DelayModel", "NodeSpec", "Resolved", "Scenario", "Workload",
           "resolve", "MetricsReport", "Simulation", "SynchronyViolation", "run"]
