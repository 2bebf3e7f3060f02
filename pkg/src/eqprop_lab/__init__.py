"""Equilibrium-propagation lab: models, estimators, oracles, and experiments."""

__version__ = "0.1.0"
