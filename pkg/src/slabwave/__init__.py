"""Layered random-media Helmholtz solver, corrector statistics, and slab transport."""

from slabwave.core import (
    ComplexField,
    Grid,
    LayerStack,
    RegimeReport,
    Scales,
    load_field,
    principal_sqrt,
    regime_report,
    save_field,
    scales_from_physical,
)
from slabwave.medium import (
    AspectSpec,
    CovarianceModel,
    InclusionSpec,
    MediumRealization,
    analytic_covariance_model,
    covariance_model_from_lattice,
    empirical_covariance,
    eval_V,
    eval_q,
    lattice_covariance,
    load_realization,
    matrix_sqrt,
    moments,
    sample_realization,
    save_realization,
)
from slabwave.helmholtz import (
    FDSolver,
    ModeSolution,
    QuadConfig,
    SolverConfig,
    free_green,
    green_norm_diagnostics,
    hankel0_first,
    hankel0_integral,
    layered_green,
    mode_green,
    solve_homogenized,
    solve_random,
)
from slabwave.corrector import (
    CltResult,
    CorrectorEnsemble,
    ScalingResult,
    WienerGrid,
    apply_green_transform,
    born_corrector,
    build_ensemble,
    clt_prediction,
    clt_statistics,
    clt_test,
    corrector_covariance,
    empirical_hs_seminorm,
    fit_scaling,
    green_field,
    load_ensemble,
    make_test_functions,
    sample_limit_corrector,
    save_ensemble,
    scaling_study,
    wiener_grid_for,
)
from slabwave.transport import (
    Caps,
    DetectorFlux,
    PhaseSpaceRay,
    SourceSet,
    TransportMedium,
    TransportResult,
    WignerDensity,
    correlation_C0,
    detector_flux_csv,
    emit_source,
    flux_balance,
    load_wigner,
    propagate,
    rt_coefficients,
    save_wigner,
    vertical_wavenumber,
    wigner_slice_csv,
)

__version__ = "0.1.0"
