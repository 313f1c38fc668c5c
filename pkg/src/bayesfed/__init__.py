"""Deterministic federated-learning simulator for Bayesian neural models."""

__version__ = "0.1.0"
