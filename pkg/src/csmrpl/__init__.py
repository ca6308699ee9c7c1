"""Desk-scale deterministic simulator of RPL secure modes.

Implements the unsecured and preinstalled-key modes (with optional replay
protection) alongside a chained secure mode that links consecutive control
messages with secret chaining values, plus three replay-family adversaries
and a reproducible metrics harness.
"""

__version__ = "0.1.0"
