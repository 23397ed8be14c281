"""Vector-quantisation perturbation lab: QPM analytics and a toy semi-supervised trainer."""

__version__ = "0.1.0"
