"""Simulation and verification lab for foliated stochastic flows."""

from .averaging import (
    AveragedField,
    AveragedTrajectory,
    AveragingErrorResult,
    DecompositionResult,
    ErrorDecomposition,
    InvariantMeasureSpec,
    PartitionScheme,
    RateBound,
    RateFit,
    averaging_error,
    decompose_error,
    default_rate_bound,
    eval_rate_bounds,
    fit_rate_exponent,
    leaf_average,
    make_partition,
    solve_averaged_ode,
)
from .drivers import (
    DriverPath,
    StreamKey,
    dump_driver,
    load_driver,
    sample_brownian,
    sample_driver,
    sample_jump_driver,
    sample_poisson_jumps,
)
from .flows import (
    CYLINDER_JUMP_RATE,
    ManifoldExit,
    NPointSeries,
    Trajectory,
    check_leaf_invariance,
    cylinder_trajectory,
    evolve_coalescing_circle,
    evolve_cylinder,
    evolve_cylinder_perturbed,
    evolve_torus,
    n_point_motion,
    torus_trajectory,
)
from .geometry import (
    CoalescingCircle,
    CylPoint,
    PerturbationField,
    RotationJumpCylinder,
    TorusPoint,
    TorusWinding,
    UnsupportedModel,
    VerticalRegion,
    leaf_defect,
    make_model,
    project_vertical,
)
from .kernels import (
    LeafGrid,
    PairGrid,
    TransitionKernel,
    build_cylinder_kernel,
    check_compatibility,
    check_diagonal_preserving,
    check_foliated,
    coalesce_two_point,
    cyclic_walk_kernel,
    function_pair_degeneracy_gap,
    independent_product_kernel,
    product_kernel_flow,
)

__version__ = "0.1.0"
