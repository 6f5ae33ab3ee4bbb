"""Online stochastic optimization under decision-dependent distribution dynamics."""

__version__ = "0.1.0"
