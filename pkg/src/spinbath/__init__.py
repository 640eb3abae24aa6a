"""Dephasing of a shallow qubit sensor by a two-dimensional electron-spin bath."""
__version__ = "0.1.0"
