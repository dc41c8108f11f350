"""Differentiable multi-agent inverted-pendulum simulator."""

from .simulator import AgentInit, PhysicsModel, PushEvent, Scenario, Trajectory, simulate

__version__ = "0.1.0"

__all__ = ["AgentInit", "PhysicsModel", "PushEvent", "Scenario", "Trajectory", "simulate", "__version__"]
