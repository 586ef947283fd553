"""Monte Carlo machinery for a measure-valued branching diffusion whose
density solves a stochastic heat equation with square-root noise and a
piecewise, configuration-dependent branching rate, together with the dual
system of interval distribution functions and a verification harness for
the identities the construction obeys."""

from .branching import (
    BranchingSpec,
    RATE_REGISTRY,
    RateFunction,
    branching_rate_at,
    branching_rate_field,
    generalized_inverse,
    gradient_at,
    make_rate,
    tail_mass,
)
from .errors import ConfigurationError, DomainError, NumericalAbort, RefusalError
from .kernels import (
    boundary_window,
    boundary_window_d1,
    boundary_window_d2,
    bump,
    bump_cdf,
    dirichlet_kernel,
    heat_kernel,
    mollifier,
    semigroup_convolve,
    smooth_exp_weight,
    smoothed_sqrt,
)
from .noise import NoiseGrid, coarsen, independent_streams, noise_row, sample_noise
from .solver import (
    DensityTrajectory,
    DistributionTrajectory,
    MassPath,
    SimConfig,
    distributions_from_density,
    initial_profile,
    simulate_blocked,
    simulate_density,
    simulate_distribution_system,
    simulate_mild,
    simulate_total_mass,
    step_density,
)
from .verify import (
    HoelderReport,
    TestFunction,
    VerificationReport,
    blocked_convergence_study,
    boundary_functional,
    check_boundary_window_limits,
    check_feller_transform,
    check_mass_martingale,
    check_quadratic_variation,
    check_weighted_moments,
    duality_refinement_study,
    duality_residual,
    estimate_hoelder_exponent,
    make_test_function,
    pathwise_stability,
)

__version__ = "0.1.0"
