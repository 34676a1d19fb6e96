"""Evidence-certified Top-K candidate ranking.

Record validation, skeleton alignment and trajectory rewards, a label-free
evidence-only verifier, reward shaping for external policies, the ordinary,
certified and audit metric suite, and a seeded synthetic benchmark.
"""
from __future__ import annotations

__version__ = "0.1.0"
