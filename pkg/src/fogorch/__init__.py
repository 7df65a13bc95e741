"""Simulated hybrid cloud/edge orchestration testbed for a five-component fog framework."""

__version__ = "0.1.0"
