"""Modular trajectory prediction: spatial encoder (R), global scene dynamics (D), local predictor (B)."""

__version__ = "0.1.0"
