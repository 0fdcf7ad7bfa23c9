"""Closed-loop MPC platooning simulator and control library."""

__version__ = "0.1.0"
