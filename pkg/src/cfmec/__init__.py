"""Seeded Monte-Carlo simulator of MEC-enabled cell-free massive MIMO uplinks.

Joint power and compute allocation by sequential convex approximation, with
cellular and C-RAN benchmarks and feasibility checks.
"""

__version__ = "0.1.0"
