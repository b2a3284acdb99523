"""Lattice domains, boundary-tunable random walks, and open SEP/SIP dynamics.

The package builds grid approximations of bounded Lipschitz domains,
assembles the associated walk and two-particle generators with a tunable
boundary-rate exponent, simulates open symmetric exclusion and inclusion
processes against boundary reservoirs, and ships a small lab of
convergence experiments with CSV, JSON and figure output.
"""

__version__ = "0.1.0"

from .geometry import (
    BoundaryCell,
    BoundaryPartition,
    DomainSpec,
    GeometryError,
    LatticeApprox,
    assign_boundary_weights,
    build_boundary_partition,
    build_domain_lattice,
    build_lattice,
    build_outer_boundary,
    domain_from_config,
    save_lattice_csv,
)
from .lab import (
    EXPERIMENT_KINDS,
    ExperimentConfig,
    ExperimentError,
    load_config,
    profile_expression,
    run_experiment,
)
from .observables import (
    AuditReport,
    CovarianceReport,
    MomentReport,
    TestFamily,
    TestFunction,
    covariance_quadrature,
    density_pairing,
    duality_audit,
    fluctuation_pairing,
    gaussianity_stats,
    hydrostatic_variance_bound,
    mild_solution,
    neumann_covariance,
    pair_duality_audit,
    pair_moment_exact,
    stationary_field_variance,
)
from .operators import (
    OperatorError,
    PairOperator,
    SpectralData,
    WalkOperator,
    assemble_pair,
    assemble_walk,
)
from .particles import (
    Configuration,
    ParticleError,
    SimParams,
    Trajectory,
    init_pile,
    init_product,
    sample_stationary,
    simulate,
    spawn_seeds,
)

__all__ = [
    "AuditReport",
    "BoundaryCell",
    "BoundaryPartition",
    "Configuration",
    "CovarianceReport",
    "DomainSpec",
    "EXPERIMENT_KINDS",
    "ExperimentConfig",
    "ExperimentError",
    "GeometryError",
    "LatticeApprox",
    "MomentReport",
    "OperatorError",
    "PairOperator",
    "ParticleError",
    "SimParams",
    "SpectralData",
    "TestFamily",
    "TestFunction",
    "Trajectory",
    "WalkOperator",
    "assemble_pair",
    "assemble_walk",
    "assign_boundary_weights",
    "build_boundary_partition",
    "build_domain_lattice",
    "build_lattice",
    "build_outer_boundary",
    "covariance_quadrature",
    "density_pairing",
    "domain_from_config",
    "duality_audit",
    "fluctuation_pairing",
    "gaussianity_stats",
    "hydrostatic_variance_bound",
    "init_pile",
    "init_product",
    "load_config",
    "mild_solution",
    "neumann_covariance",
    "pair_duality_audit",
    "pair_moment_exact",
    "profile_expression",
    "run_experiment",
    "sample_stationary",
    "save_lattice_csv",
    "simulate",
    "spawn_seeds",
    "stationary_field_variance",
]
