"""Accuracy metrics, evaluation scenarios, and plots."""
