"""Desk-scale federated learning simulator for trigger-optimized backdoors and robust aggregation."""

__version__ = "0.1.0"
