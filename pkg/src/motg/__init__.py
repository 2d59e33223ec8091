"""Mixture-of-token generation inside GRPO, at desk scale."""

__version__ = "0.1.0"
