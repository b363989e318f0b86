"""Deterministic network simulator with a catalog of Byzantine behaviors."""
from .behaviors import BEHAVIORS, EXPECTED, expected_detection
from .engine import Simulator, Trace, run
from .scenario import Scenario, ScenarioError, dump, load

__all__ = ["BEHAVIORS", "EXPECTED", "Scenario", "ScenarioError", "Simulator", "Trace",
           "dump", "expected_detection", "load", "run"]
