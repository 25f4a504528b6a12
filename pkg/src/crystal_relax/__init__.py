"""Crystal-surface relaxation with facets: Rothe time stepping of a
regularized p-Laplacian / one-Laplacian surface energy under an anisotropic
mobility, on a staggered finite-volume grid."""
from .grid import (
    FaceVectorField,
    GridSpec,
    ScalarField,
    divergence,
    gradient,
    inner_cells,
    inner_faces,
    integrate,
    lp_norm_faces,
    read_field_csv,
    write_field_csv,
)
from .model import (
    MobilityField,
    ModelParams,
    dissipation_integral,
    energy_G,
    energy_phi,
    flux_coeff,
    mobility_at,
    mobility_quadratic_form,
)
from .scheme import (
    StepFailure,
    StepState,
    Trajectory,
    advance,
    eval_bar_u,
    eval_bar_v,
    eval_tilde_u,
    fixed_point_step,
    lyapunov,
    lyapunov_ledger,
    map_B,
    mass_law_check,
    refinement_cauchy,
)
from .solvers import (
    LinearOperatorSpec,
    NonConvergence,
    SolverConfig,
    SolverError,
    apply_mobility_operator,
    apply_p_laplacian_forward,
    cg_solve,
    picard_p_laplacian,
    solve_mobility_system,
)

__version__ = "0.1.0"
