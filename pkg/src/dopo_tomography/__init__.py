"""Desk-scale simulation of intracavity Husimi-Q tomography with a biased DOPO.

The package integrates degenerate optical parametric oscillator (DOPO)
quadrature dynamics, turns bias sweeps into steady-state probabilities,
and reconstructs Q functions from the probability sensitivity by
filtered back-projection.
"""

from dopo_tomography.model import (
    BiasSpec,
    FVariance,
    GaussianStateSpec,
    PhasePoint,
    PumpParams,
    displacement,
    erf,
    erf_probability,
    f_variance,
    gaussian_q,
    theoretical_marginal,
    vacuum_q,
)

__version__ = "0.1.0"

__all__ = [
    "BiasSpec",
    "FVariance",
    "GaussianStateSpec",
    "PhasePoint",
    "PumpParams",
    "displacement",
    "erf",
    "erf_probability",
    "f_variance",
    "gaussian_q",
    "theoretical_marginal",
    "vacuum_q",
    "__version__",
]
