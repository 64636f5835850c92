"""Bias and precision of spatial regression estimators under spatial confounding.

Numerical library plus a Monte Carlo experiment harness for studying how
the spatial scales of an exposure and of residual variation drive bias
(under unmeasured spatial confounding) and precision of OLS, GLS,
mixed-model/kriging, and penalized-spline estimators.
"""

__version__ = "0.1.0"
