"""Spectral simulation and null-control synthesis on the periodic torus.

The package models a compressible capillary fluid linearized around a constant
density state, classifies the coupling structure of its adjoint subsystem,
builds smooth space-time control weights, synthesizes localized null controls
by a penalized quadratic method, runs the nonlinear fixed-point control loop,
and certifies weighted energy inequalities and observability constants.

Modules
-------
model      physical coefficients, derived constants, coupling classification
spectral   torus grids, Fourier fields, exact operators, dealiased products
weights    control regions, cutoffs, spatial/temporal weight family
dynamics   per-mode exact integrators for the linear systems
hum        penalized quadratic control synthesis and the cascaded pair loop
nonlinear  nonlinear terms, full integrator, fixed-point control loop
certify    weighted-inequality and observability certification
cli        scenario files, command orchestration, CSV/figure/snapshot output
"""

from .certify import (
    CarlemanEntry,
    CarlemanReport,
    ManufacturedCase,
    ObservabilityReport,
    carleman_check,
    estimate_observability,
    manufactured_suite,
)
from .dynamics import (
    SYSTEM_KINDS,
    DecayReport,
    ModeBlockSystem,
    TimeGrid,
    Trajectory,
    assemble_blocks,
    decay_report,
    propagate,
)
from .errors import (
    BallExit,
    ConstructionFailure,
    GridMismatch,
    H1Violation,
    InvalidZeta,
    IterationStall,
    NeighborhoodExceeded,
    NoConvergence,
    NskError,
    OutOfDomain,
    ParseError,
    PicardDivergence,
    RankMismatch,
    ShapeMismatch,
    StepRejected,
    UnknownSystem,
    ValidationError,
)
from .hum import (
    TERMINAL_WEIGHTS,
    WEIGHT_MODES,
    ControlledTrajectory,
    HumProblem,
    cascaded_pair_control,
    gramian_apply,
    solve_null_control,
)
from .model import (
    CoefficientFunction,
    DerivedConstants,
    ModelParams,
    StructureClassification,
    classify,
    coupling_coefficients,
    derive_constants,
)
from .nonlinear import (
    NonlinearTrajectory,
    PicardState,
    UnderlineFunctions,
    eval_nonlinear,
    evaluate_source_series,
    picard_control_loop,
    simulate_nonlinear,
    source_norm,
)
from .spectral import (
    SpectralField,
    TorusGrid,
    dealiased_product,
    differentiate,
    evaluate_at,
    sobolev_norm,
)
from .weights import (
    Box,
    ControlRegion,
    ThetaParams,
    WeightSet,
    build_psi,
    evaluate_weights,
    make_weight_set,
    theta,
    theta_derivative,
)

__all__ = [
    "BallExit",
    "Box",
    "CarlemanEntry",
    "CarlemanReport",
    "CoefficientFunction",
    "ConstructionFailure",
    "ControlRegion",
    "ControlledTrajectory",
    "DecayReport",
    "DerivedConstants",
    "GridMismatch",
    "H1Violation",
    "HumProblem",
    "InvalidZeta",
    "IterationStall",
    "ManufacturedCase",
    "ModeBlockSystem",
    "ModelParams",
    "NeighborhoodExceeded",
    "NoConvergence",
    "NonlinearTrajectory",
    "NskError",
    "ObservabilityReport",
    "OutOfDomain",
    "ParseError",
    "PicardDivergence",
    "PicardState",
    "RankMismatch",
    "SYSTEM_KINDS",
    "ShapeMismatch",
    "SpectralField",
    "StepRejected",
    "StructureClassification",
    "TERMINAL_WEIGHTS",
    "ThetaParams",
    "TimeGrid",
    "TorusGrid",
    "Trajectory",
    "UnderlineFunctions",
    "UnknownSystem",
    "ValidationError",
    "WEIGHT_MODES",
    "WeightSet",
    "assemble_blocks",
    "build_psi",
    "carleman_check",
    "cascaded_pair_control",
    "classify",
    "coupling_coefficients",
    "dealiased_product",
    "decay_report",
    "derive_constants",
    "differentiate",
    "estimate_observability",
    "evaluate_at",
    "evaluate_source_series",
    "evaluate_weights",
    "eval_nonlinear",
    "gramian_apply",
    "make_weight_set",
    "manufactured_suite",
    "picard_control_loop",
    "propagate",
    "simulate_nonlinear",
    "sobolev_norm",
    "solve_null_control",
    "source_norm",
    "theta",
    "theta_derivative",
]
