"""Simulator and control plane for a software-defined QKD metro network."""

__version__ = "0.1.0"
