"""Multi-task low-rank adapter bank with grouped routing, spectral
regularization, and gradient-conflict diagnostics on a frozen toy
transformer."""

__version__ = "0.1.0"
