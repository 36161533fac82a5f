"""Desk-scale diffusion laboratory.

Exact empirical score oracles over finite point clouds, supervision-region
geometry, probability-flow sampling, region-decoupled training, and
memorization/extrapolation diagnostics, all runnable as deterministic CLI
experiments.
"""

__version__ = "0.1.0"
