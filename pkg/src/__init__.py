"""Distill That Prompt - prompt learning for dual encoders by teacher distillation."""

__version__ = "0.1.0"
