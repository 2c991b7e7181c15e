"""Cached fault-suite runs shared by the transport, scheduler and harness tests."""

from functools import lru_cache

from tailcopy.harness.runner import run_scenario
from tailcopy.harness.suites import fault_scenarios


@lru_cache(maxsize=None)
def suite_run(name: str, seed: int = 0):
    sc = fault_scenarios([name])[0]
    return run_scenario(sc, seed=seed)


def ops(run, kind=None):
    return [r for r in run.sim.log if r["ev"] == "op" and (kind is None or r["kind"] == kind)]


def assigns(run, reason=None):
    return [r for r in run.sim.log if r["ev"] == "assign" and (reason is None or r["reason"] == reason)]


def uid(name: str) -> str:
    return name.rsplit("#", 1)[1]
