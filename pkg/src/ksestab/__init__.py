"""Observer-based output-feedback stabilization of the Kuramoto-Sivashinsky equation.

Modules
-------
spectral   closed-form modal data of the lifted plant
synthesis  resonance classification, scheme choice, pole placement
certifier  reduced-order model and stability constraints
simulator  modal Galerkin closed-loop simulation
cli        batch front end (``ksestab`` console script)
"""
from .certifier import Certificate, SearchConfig, certify, min_feasible_N, verify_certificate
from .errors import BlowUp, KsestabError, NotControllable
from .simulator import SimConfig, Trajectory, decay_rate_fit, h2_norm, simulate
from .spectral import PlantParams, Scheme, SpectralPlant
from .synthesis import GainSet, classify_lambda, select_scheme, select_xi, synthesize

__all__ = [
    "BlowUp", "Certificate", "GainSet", "KsestabError", "NotControllable", "PlantParams",
    "Scheme", "SearchConfig", "SimConfig", "SpectralPlant", "Trajectory", "certify",
    "classify_lambda", "decay_rate_fit", "h2_norm", "min_feasible_N", "select_scheme",
    "select_xi", "simulate", "synthesize", "verify_certificate",
]
__version__ = "0.1.0"
