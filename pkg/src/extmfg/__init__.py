"""Stationary extended mean-field games on the torus.

Homotopy continuation solver for the coupled HJB / Fokker-Planck / velocity
system together with discrete checks of its integral identities, adjoint
representation formula and structural hypotheses.
"""

from .adjoint import FrozenHamiltonian, FunctionF, evolve_adjoint, oscillation_bound_panel, representation_check
from .assumptions import AssumptionReport, check_assumptions
from .diagnostics import (
    DiagnosticsOptions,
    diagnostics_report,
    energy_identity_gap,
    monotonicity_form,
    multiplier_identity_gaps,
    norm_panel,
)
from .errors import (
    AdjointError,
    ConfigError,
    ContinuationError,
    DomainError,
    GridMismatchError,
    MFGError,
    NewtonStalledError,
    OracleError,
    SingularSystemError,
    VelocityFixedPointError,
)
from .hamiltonians import (
    FAMILIES,
    Coupling,
    FourierSeries,
    HamiltonianModel,
    LambdaFamily,
    LogCoupling,
    PowerCoupling,
    blend,
    make_model,
    quadratic_log,
    quadratic_power,
    special_aniso,
    velocity_coupled,
)
from .io import read_checkpoint, write_checkpoint
from .solver import (
    ContinuationConfig,
    ContinuationTrace,
    MFGState,
    assemble_linearization,
    assemble_residual,
    continuation_run,
    initial_state,
    newton_solve,
    picard_oracle,
    resolve_velocity,
)
from .torus import TorusGrid, fp_operator, gradient, hessian, integrate, laplacian, transport_operator

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
