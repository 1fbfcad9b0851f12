"""Continuous-measurement filtering for open quantum systems."""
