"""Distillation-based multi-task learning for duration-aware candidate generation."""

__version__ = "0.1.0"
