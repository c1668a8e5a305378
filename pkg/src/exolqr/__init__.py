"""Finite-horizon LQR coupled to an exogenous feature-based Markov signal.

Subpackages cover controller synthesis (riccati), the exogenous process
model (environment), the least-squares value-iteration learner (lsvi),
ground-truth oracles (oracle), stability and regret diagnostics (analysis),
and the experiment pipeline (config, reporting, cli).
"""

__version__ = "0.1.0"
