"""Condition numbers, step sizes and preconditioning for HMC on Gaussian targets."""

from importlib.metadata import PackageNotFoundError, version

from hmc_kappa.errors import KappaError
from hmc_kappa.integrator import IntegrationTimeLaw, PhasePoint
from hmc_kappa.spectra import CovarianceModel, GeneratorParams, Spectrum, SpdMatrix, kappa, kappa_spd, nu

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "CovarianceModel",
    "GeneratorParams",
    "IntegrationTimeLaw",
    "KappaError",
    "PhasePoint",
    "Spectrum",
    "SpdMatrix",
    "kappa",
    "kappa_spd",
    "nu",
]
