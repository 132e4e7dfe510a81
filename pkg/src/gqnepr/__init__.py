"""Spatio-temporal models with GQN-calibrated low-rank covariance, fitted by exact posterior regression."""

__version__ = "0.1.0"
