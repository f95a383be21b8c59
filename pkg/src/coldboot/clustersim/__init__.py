"""Deterministic virtual-time simulation of multi-node job startups."""
from .engine import Barrier, Event, Flow, FlowNetwork, Link, Resource, Simulator
from .scenario import (JobRun, NodeMetrics, Policies, ScenarioConfig, inject_fault,
                       parse_fault, run_scenario)

__all__ = ["Barrier", "Event", "Flow", "FlowNetwork", "Link", "Resource", "Simulator",
           "JobRun", "NodeMetrics", "Policies", "ScenarioConfig", "inject_fault",
           "parse_fault", "run_scenario"]
