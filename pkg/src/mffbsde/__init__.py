"""Particle solver for coupled mean-field FBSDEs and mean-field games."""

__version__ = "0.1.0"

from .coefficients import (  # noqa: E402
    CoefficientBundle,
    PopulationSystem,
    ProbeSpec,
    reduced_drift,
    shifted_driver,
    validate_assumptions,
)
from .forward import PathEnsemble, simulate_feedback, simulate_reference  # noqa: E402
from .girsanov import doleans_exponential, effective_sample_size, martingale_diagnostic, weighted_law  # noqa: E402
from .lsmc import PolynomialBasis, evaluate_d, evaluate_u, solve_bsde  # noqa: E402
from .measures import (  # noqa: E402
    EmpiricalMeasure,
    MeasureFlow,
    TimeGrid,
    flow_distance,
    holder_modulus,
    product_distance,
    wasserstein1,
    wasserstein1_1d,
    wasserstein1_sliced,
)
from .mfg import (  # noqa: E402
    ControlSet,
    GameSpec,
    Population,
    assemble_pontryagin,
    estimate_cost,
    hamiltonian,
    maximize_shifted_driver,
    minimize_hamiltonian,
    verify_equilibrium,
)
from .picard import PsiConfig, iterate, multi_start, psi_map, residual_check  # noqa: E402
from .solvers import MeanFieldFBSDESolver, MeanFieldGameSolver, solve_equilibrium  # noqa: E402
