"""Deterministic benchmark construction: mapping, windows, synthesis, negatives, pairs."""
