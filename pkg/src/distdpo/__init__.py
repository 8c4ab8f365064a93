"""Preference-aligned score distillation for point-cloud scene completion."""
__version__ = "0.1.0"
