"""Compute-lean CNN training: early instance filtering and error-map pruning
with an exact FLOP ledger."""

__version__ = "0.1.0"
