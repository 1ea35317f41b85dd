"""Gradient-influence consensus data selection."""
