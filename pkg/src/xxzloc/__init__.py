"""Exact-diagonalization laboratory for localization in the random XXZ chain.

Submodules: ``lattice`` (regions, sectors, cluster combinatorics),
``operators`` (Hamiltonians and projections), ``probes`` (resolvent,
evolution and decay estimators), ``disorder`` (Monte Carlo over the random
field), ``identities`` (exact-identity verification) and ``cli``.
"""
__version__ = "0.1.0"

from .lattice import (INFINITE, PreconditionError, Region, RegionError, Sector, SpinConfig, boundary,
                      cluster_count, count_configs_closed_form, deform_region, enumerate_configs, rho, shell)
from .operators import (DisorderRealization, ModelParams, OperatorMatrix, ParamError, P_minus, P_plus,
                        build_decoupled, build_hamiltonian, diagonalize, energy_interval)
from .probes import (ProbeParams, ct_certificate, dressed_resolvent_block, energy_reduction_check,
                     evolution_decay_check, f_estimator, fit_decay)
from .disorder import (DistributionSpec, dynloc_expectation, event_probability, frac_moment_scan, sample_omega,
                       wegner_scan)
from .identities import run_battery, run_decoupling_battery

__all__ = [
    "__version__",
    "INFINITE", "PreconditionError", "Region", "RegionError", "Sector", "SpinConfig", "boundary",
    "cluster_count", "count_configs_closed_form", "deform_region", "enumerate_configs", "rho", "shell",
    "DisorderRealization", "ModelParams", "OperatorMatrix", "ParamError", "P_minus", "P_plus",
    "build_decoupled", "build_hamiltonian", "diagonalize", "energy_interval",
    "ProbeParams", "ct_certificate", "dressed_resolvent_block", "energy_reduction_check",
    "evolution_decay_check", "f_estimator", "fit_decay",
    "DistributionSpec", "dynloc_expectation", "event_probability", "frac_moment_scan", "sample_omega",
    "wegner_scan",
    "run_battery", "run_decoupling_battery",
]
