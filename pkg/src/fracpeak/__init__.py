"""fracpeak: multi-peak concentration solver and verifier for a fractional
Schrodinger Dirichlet problem at desk scale."""

from .errors import (
    BudgetExceeded,
    ConfigInvalid,
    ContractionFailed,
    FracpeakError,
    HitBoundary,
    NegativePi,
    NewtonDiverged,
    NoConvergence,
    OutOfRange,
    PositivityLost,
    SingularBordered,
    SingularSystem,
    StepBelowGrid,
    TailTooLarge,
)
from .gridcore import (
    Domain,
    Field,
    FracOp,
    apply_free,
    assemble_dirichlet,
    free_space_op,
    solve_dirichlet,
)
from .groundstate import (
    GroundState,
    GroundStateOptions,
    Peak,
    RadialProfile,
    constants,
    rescale,
    sample_peak,
    solve_ground_state,
    z_kernel,
)
from .corrections import (
    AnsatzBundle,
    PeakConfig,
    build_ansatz,
    corrected_peak,
    interaction_integral,
    pi_weighted_integrals,
)
from .reduction import (
    FixedPointOptions,
    NormSpec,
    ProjectedSolve,
    error_term,
    multipliers_leading,
    nonlinear_term,
    solve_nonlinear_projected,
    solve_projected_linear,
    star_norm,
)
from .energy import (
    Potential,
    Region,
    balance_residual,
    bump_potential,
    constant_potential,
    double_well_potential,
    energy,
    find_critical_config,
    free_energy,
    reduced_energy,
    reduced_gradient,
)

__version__ = "0.1.0"
