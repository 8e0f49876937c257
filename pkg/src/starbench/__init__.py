"""Desk-scale testbed for state-perturbation attacks on continuous-control policies."""

__version__ = "0.1.0"
