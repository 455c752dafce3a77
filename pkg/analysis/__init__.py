"""Entanglement diagnostics and hyperparameter sweeps."""
