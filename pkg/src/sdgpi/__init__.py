"""Risk-minimizing two-player zero-sum stochastic differential games.

Saddle-point policies are evaluated online by Monte Carlo path-integral
estimation over uncontrolled rollouts; a finite-difference Dirichlet solver
provides ground truth on low-dimensional games.
"""

from .closed_loop import (
    CostLedger,
    GameOutcome,
    PolicyHandle,
    empirical_game_value,
    estimate_failure_probability,
    run_trial,
    saddle_pair,
    theorem3_check,
    wilson_interval,
    zero_policy,
)
from .engine import (
    ExitKind,
    NoiseIncrement,
    Trajectory,
    em_step,
    rollout_controlled,
    rollout_uncontrolled,
    simulate_batch,
    wiener_increments,
)
from .errors import (
    ConfigError,
    DegenerateBatch,
    EnergyBoundViolated,
    GameError,
    NonFiniteState,
    NoValidLambda,
    PolicyFailure,
    SingularGain,
    StencilOutOfDomain,
    UnstableSolve,
)
from .model import (
    GameSpec,
    LambdaCertificate,
    SafeSet,
    gain_matrices,
    phi_terminal,
    probe_points,
    resolve_lambda,
    running_cost,
)
from .oracle import (
    Grid2D,
    PdeSolution,
    controls_from_solution,
    exit_probability_reference,
    hji_residual,
    solve_dirichlet,
    value_at,
    xi_at,
)
from .pathint import (
    RolloutBatch,
    SaddleControls,
    XiEstimate,
    estimate_saddle_controls,
    estimate_xi,
    generate_batch,
    saddle_from_batch,
    trajectory_cost,
    value_from_xi,
    xi_from_batch,
)
from .scenarios import (
    ScenarioConfig,
    attenuation_lambda,
    build_pe_spec,
    build_spec,
    build_unicycle_spec,
    emit_config,
    parse_config,
)
from .streams import RngStreamKey

__version__ = "0.1.0"
