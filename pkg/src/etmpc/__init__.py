"""Event-triggered nonlinear MPC with a learned recomputation policy."""

__version__ = "0.1.0"
