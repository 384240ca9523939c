"""Renormalization-group flow for a hierarchical O(r) spin model with long-range couplings.

The submodules cover the coupling sequence, radial densities, the level-by-level
flow with its high and low temperature trackers, the limiting fixed point, the
critical temperature scan, a Monte Carlo oracle and a command-line front end.
"""

__version__ = "0.1.0"
