"""Contingency-management MDP/POMDP planning and Monte Carlo evaluation."""

__version__ = "0.1.0"
