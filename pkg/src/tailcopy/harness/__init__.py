"""Scenario runner, checkers and command line for the simulator."""

from .runner import Run, dump_report, run_scenario
from .scenario import Scenario, ScenarioError, from_dict, load

__all__ = ["Run", "Scenario", "ScenarioError", "dump_report", "from_dict", "load", "run_scenario"]
