"""Separately exchangeable Bayesian nonparametric models.

Two models built around invariance under independent row and column
permutations of a data matrix: a nested-partition common-atoms normal
mixture for OTU-by-subject tables, and a DP mixture of spline regressions
(ANOVA DDP) for protein-by-subject tables. Plus Gibbs samplers, posterior
partition and ranking summaries, Monte Carlo exchangeability checks,
simulation-truth generators, and a CLI.
"""

__version__ = "0.1.0"
