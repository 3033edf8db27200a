"""Distributed GNN link-prediction training with time-based model aggregation."""

__version__ = "0.1.0"
