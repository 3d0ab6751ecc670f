"""Multi-channel continuous speech separation from PHAT-weighted spatial correlations."""

__version__ = "0.1.0"
