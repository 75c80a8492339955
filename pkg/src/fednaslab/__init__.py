"""fednaslab: federated architecture search with differentially private training.

A desk-scale, single-process laboratory: per-client genetic search over a
block-based architecture space, privacy-constrained Bayesian hyperparameter
optimization, DP-SGD local training with Renyi accounting, sample-level
representation aggregation on a simulated server, and numeric calculators
for the convergence bounds that govern the learning rates.
"""

__version__ = "0.1.0"
