"""Conditional sum-product networks (CSPNs) for tractable P(Y | X)."""

from .circuit import (
    Circuit,
    CircuitBuilder,
    Evidence,
    GatingFunction,
    expectation,
    log_density,
    log_marginal,
    mpe,
    sample,
    validate,
)
from .leaves import FitControl, GlmLeaf, fit_irwls
from .learn import LearnParams, learn_cspn
from .optimize import OptControl, train

__version__ = "0.1.0"
