"""Backward SDEs on the Wasserstein space: solvers and verifiers."""

__version__ = "0.1.0"
