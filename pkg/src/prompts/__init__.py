"""Prompt template and vocabulary loading utilities."""
