"""Certified multiscale constructions of functions with degenerate Hessians.

The package builds scalar fields (and first-order vector analogues) that stay
close to a smooth reference in the Hoelder scale while their k-th singular
value invariant is driven toward zero in an integral sense, and it measures
every claimed inequality as it goes. Nothing is trusted to the construction
alone: each stage emits a certificate with measured quantities and quadrature
error bars.
"""

__version__ = "0.1.0"

from degenhess.invariants import (
    EigenConvergenceError,
    Spectrum,
    ck,
    ck_lipschitz_bound,
    elementary_symmetric,
    lk,
    op_norm,
    polar_decompose,
    rank_below,
    singular_values,
    sym_eigen,
    sym_eigvals,
)
from degenhess.fields import (
    Box,
    CubePartition,
    DomainError,
    FieldDifference,
    GridDump,
    PartitionCapError,
    QuadratureSpec,
    ScalarFieldC2,
    dump_grid,
    integrate_on_cube,
    integrate_on_partition,
    load_grid,
)
from degenhess.atom import (
    AtomParams,
    AtomTuningError,
    CERTIFICATION_SUITE,
    PerturbationAtom,
    VectorAtom,
    build_atom,
    build_vector_atom,
    certification_bound,
    certify_atom,
    predicted_contraction,
    tune_atom,
    zero_atom,
)
from degenhess.staircase import (
    AssembledConstruction,
    ConstructionResult,
    LinearMapBase,
    PiecewiseField,
    ScheduleError,
    StageCertificate,
    StagePerturbation,
    StageRecord,
    StageSchedule,
    StairConfig,
    VectorFieldC1,
    VectorStagePerturbation,
    assemble_box_domain,
    default_tau,
    field_invariant_integrals,
    plan_stage,
    run_construction,
    run_first_order,
    run_stage,
)
from degenhess.measures import (
    DensityTrace,
    HessianMeasure,
    HolderDistance,
    MeasureCheckError,
    WeakstarGap,
    ck_mass,
    density_trace,
    holder_distance,
    mass_bound_check,
    sobolev_seminorm,
    stage_measures,
    test_function_family,
    weakstar_gap,
)
from degenhess.config import (
    BaseSpec,
    ConfigError,
    RunConfig,
    parse_config,
    serialize_config,
)
from degenhess.report import (
    STAGE_COLUMNS,
    run_report_text,
    soft_failures,
    write_measures_csv,
    write_run_dir,
    write_stage_csv,
)

__all__ = [
    "assemble_box_domain",
    "AssembledConstruction",
    "AtomParams",
    "AtomTuningError",
    "BaseSpec",
    "Box",
    "build_atom",
    "build_vector_atom",
    "certification_bound",
    "CERTIFICATION_SUITE",
    "certify_atom",
    "ck",
    "ck_lipschitz_bound",
    "ck_mass",
    "ConfigError",
    "ConstructionResult",
    "CubePartition",
    "default_tau",
    "density_trace",
    "DensityTrace",
    "DomainError",
    "dump_grid",
    "EigenConvergenceError",
    "elementary_symmetric",
    "field_invariant_integrals",
    "FieldDifference",
    "GridDump",
    "HessianMeasure",
    "holder_distance",
    "HolderDistance",
    "integrate_on_cube",
    "integrate_on_partition",
    "LinearMapBase",
    "lk",
    "load_grid",
    "mass_bound_check",
    "MeasureCheckError",
    "op_norm",
    "parse_config",
    "PartitionCapError",
    "PerturbationAtom",
    "PiecewiseField",
    "plan_stage",
    "polar_decompose",
    "predicted_contraction",
    "QuadratureSpec",
    "rank_below",
    "run_construction",
    "run_first_order",
    "run_report_text",
    "run_stage",
    "RunConfig",
    "ScalarFieldC2",
    "ScheduleError",
    "serialize_config",
    "singular_values",
    "sobolev_seminorm",
    "soft_failures",
    "Spectrum",
    "STAGE_COLUMNS",
    "stage_measures",
    "StageCertificate",
    "StagePerturbation",
    "StageRecord",
    "StageSchedule",
    "StairConfig",
    "sym_eigen",
    "sym_eigvals",
    "test_function_family",
    "tune_atom",
    "VectorAtom",
    "VectorFieldC1",
    "VectorStagePerturbation",
    "weakstar_gap",
    "WeakstarGap",
    "write_measures_csv",
    "write_run_dir",
    "write_stage_csv",
    "zero_atom",
    "__version__",
]
