"""Non-uniform score-based diffusion at desk scale.

Forward SDE families with closed-form kernels, multiscale Haar diffusion
with a cascaded sampler, conditional score estimators (CDE, CDiffE, CMDE)
and analytic oracles to check them against.
"""

from .errors import ContractError, DomainError, NumericalError
from .sde import (
    Family,
    NonUniformSde,
    Scheme,
    SdeSpec,
    TimeGrid,
    diffuse,
    integrate_reverse,
    perturbation_kernel,
    reverse_drift,
    snr,
    tweedie_denoise,
)

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DomainError",
    "Family",
    "NonUniformSde",
    "NumericalError",
    "Scheme",
    "SdeSpec",
    "TimeGrid",
    "diffuse",
    "integrate_reverse",
    "perturbation_kernel",
    "reverse_drift",
    "snr",
    "tweedie_denoise",
]
