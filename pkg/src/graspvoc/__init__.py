"""Task-conditioned grasp selection from labelled point-cloud subparts."""

__version__ = "0.1.0"
