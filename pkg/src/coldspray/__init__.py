"""Surface-deposition simulation, model calibration and learned per-pass
nozzle-speed control."""

from .calibration import CalibrationDataset, FitConfig, ParamBounds, PassRecord, fit, objective, simulate_pass
from .costs import AugmentedCost, CostWeights, PerPassCost, QuadraticCost, QuadraticExpansion, augmented_cost, per_pass_cost, quadratize, running_cost, terminal_cost
from .errors import (
    AllStartsFailed,
    ClearanceViolation,
    ColdsprayError,
    DimensionMismatch,
    Diverged,
    IncompatibleCheckpoint,
    InfeasibleTarget,
    InvalidGeometry,
    NegativeDeposit,
    NonFiniteLoss,
    NotPositiveDefinite,
    SingularCovariance,
    SingularPrecision,
)
from .gps import GoalSchedule, GpsConfig, GpsState, make_goal_schedule, randomize_initial_states, run
from .harness import ConstantSpeed, RunConfig, RunReport, VaryingSpeed, baseline_run, closed_loop_run, compare_runs, material_volume
from .ilqr import ILqrConfig, LinearDynamics, LinearGaussianController, nominal_seed, solve
from .model import (
    ControlBounds,
    CouponSpec,
    DepositionModel,
    GridSpec,
    ModelParams,
    NoiseSpec,
    NozzleState,
    SimState,
    Trajectory,
    add_measurement_noise,
    coupon_target,
    deposition_rate,
    efficiency,
    linearize_dynamics,
    make_coupon,
    rollout,
    spray_shape,
    step,
)
from .policy import MlpWeights, PolicyParams, TrainConfig, forward, init_weights, loss_and_grad, policy_covariance, train

__version__ = "0.1.0"
