"""Numerical lab for an almost Hermitian curvature flow on flat tori."""

from .lattice import Lattice, LatticeField, NormReport, norms
from .structure import AHStructure, TangentPerturbation, build_structure, check_structure, standard_structure
from .connection import canonical_connection, levi_civita, nijenhuis
from .flow import FlowParams, Trajectory, run
from .linear import LinearOperatorHandle, SpectrumReport, apply_L, flat_handle, spectrum, weitzenbock_residual
from .perturb import generate_perturbation, psi_of, rho_of
from .harness import decay_fit, recenter, run_experiment, start_close_stay_close
from .storage import ExperimentConfig, load_config, read_checkpoint, write_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AHStructure",
    "ExperimentConfig",
    "FlowParams",
    "Lattice",
    "LatticeField",
    "LinearOperatorHandle",
    "NormReport",
    "SpectrumReport",
    "TangentPerturbation",
    "Trajectory",
    "apply_L",
    "build_structure",
    "canonical_connection",
    "check_structure",
    "decay_fit",
    "flat_handle",
    "generate_perturbation",
    "levi_civita",
    "load_config",
    "nijenhuis",
    "norms",
    "psi_of",
    "read_checkpoint",
    "recenter",
    "rho_of",
    "run",
    "run_experiment",
    "spectrum",
    "standard_structure",
    "start_close_stay_close",
    "weitzenbock_residual",
    "write_checkpoint",
]
