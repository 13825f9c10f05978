"""Synthetic data, offline evaluation, baselines and the command line."""
