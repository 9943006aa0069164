"""Simulator of a feedback-driven levitated-nanosphere phonon laser."""

__version__ = "0.1.0"
