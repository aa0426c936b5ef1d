"""Learning dynamics of JEPA and MAE objectives in deep linear models."""

__version__ = "0.1.0"
