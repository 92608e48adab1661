"""Numerical toolkit for invariant-measure large deviations of
countable-state mean-field interacting particle systems: exact
N-particle simulation, the mean-field limit flow, the finite-horizon
action functional in variational and control form, and constructive
quasipotential bounds."""

__version__ = "0.1.0"
