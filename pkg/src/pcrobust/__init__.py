"""Adversarially robust point-cloud classification via mutual-information
minimization and curriculum-paced training."""

__version__ = "0.1.0"
