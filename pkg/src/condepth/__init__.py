"""Conditional-depth transformer lab: per-token full/cheap FFN routing under a
hard top-k budget, trained with utility-score controllers."""

__version__ = "0.1.0"
