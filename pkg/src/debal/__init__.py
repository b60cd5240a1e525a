"""Balancing unobserved confounding in debiased recommendation."""
