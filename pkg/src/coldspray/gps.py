"""Constrained policy distillation: alternate guide re-optimization,
sampling, supervised policy training and dual updates.

Each outer iteration (1) re-solves every guiding controller against the
augmented per-pass objective, warm-started from its previous solution,
(2) samples trajectories from the guides, (3) regresses the policy network
onto the sampled guide means weighted by their precisions, and (4) nudges the
Lagrange multipliers along the policy/guide mean gap.  Per-step penalty
weights follow a schedule that keeps the sampled KL divergence between guide
and policy roughly level across time steps.

Guides are trained per pass toward interpolated intermediate goals, starting
from the previous goal surface; sampled starting surfaces carry measurement
noise and the propagated effect of earlier guides so the policy sees realistic
off-nominal states.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ilqr, policy as policy_net
from .costs import AugmentedCost, CostWeights, PerPassCost, trajectory_cost
from .errors import Diverged, InfeasibleTarget
from .model import ControlBounds, DepositionModel, NoiseSpec, NozzleState, SimState

Array = np.ndarray


@dataclass(frozen=True)
class GpsConfig:
    n_guides: int = 3
    n_samples: int = 5
    n_iterations: int = 10
    steps_per_pass: int = 30
    dual_step: float = 0.1
    nu_init: float = 0.01
    nu_factor_up: float = 2.0
    nu_factor_down: float = 0.5
    nu_min: float = 1e-4
    nu_max: float = 1e4
    kl_band: tuple[float, float] = (0.5, 2.0)
    n_hidden: int = 10
    seed: int = 0
    convergence_rtol: float = 1e-2
    speed_only: bool = True
    nozzle_height: float = 8.0
    start_position: float | None = None
    weights: CostWeights = CostWeights(w1=0.005)
    bounds: ControlBounds = ControlBounds()
    noise: NoiseSpec = NoiseSpec(measurement_std=0.01)
    train: policy_net.TrainConfig = policy_net.TrainConfig()
    ilqr: ilqr.ILqrConfig = ilqr.ILqrConfig(max_iters=40, cost_tol=1e-4)

    def __post_init__(self):
        if min(self.n_guides, self.n_samples, self.steps_per_pass) < 1 or self.n_iterations < 0:
            raise ValueError("guide, sample and horizon counts must be positive")
        if not 0.0 < self.dual_step <= 1.0:
            raise ValueError("dual_step must lie in (0, 1]")
        if self.nu_init <= 0.0:
            raise ValueError("nu_init must be positive")


@dataclass(frozen=True, eq=False)
class GoalSchedule:
    """Intermediate pass goals, first row closest to the start profile and
    the last equal to the target fill."""

    goals: Array  # (M, n_cells)
    horizon: int


@dataclass(eq=False)
class GpsState:
    guides: list
    policy: policy_net.PolicyParams
    lambdas: Array  # (M, T, n_u)
    nus: Array      # (T,)
    iteration: int


@dataclass(eq=False)
class GpsDataset:
    """Samples drawn from the guides: visited states with the guide mean at
    each, plus the per-(guide, step) covariances and dual variables in force
    when the samples were taken."""

    states: Array   # (M, N, T, n_x)
    mu_q: Array     # (M, N, T, n_u)
    sigma_q: Array  # (M, T, n_u, n_u)
    nus: Array      # (T,)
    lambdas: Array  # (M, T, n_u)


@dataclass(eq=False)
class GpsDiagnostics:
    iterations: list
    converged: bool
    guides: list
    schedule: GoalSchedule


def make_goal_schedule(initial, target, n_guides: int, horizon: int = 1) -> GoalSchedule:
    """Linear interpolation from the start profile to the target, one goal
    per pass.  Cells already at target stay fixed across all goals."""
    initial = np.asarray(initial, dtype=float)
    target = np.asarray(target, dtype=float)
    if np.any(target < initial - 1e-12):
        raise InfeasibleTarget("target lies below the starting profile somewhere")
    fractions = np.arange(1, n_guides + 1)[:, None] / n_guides
    goals = initial[None, :] + fractions * (target - initial)[None, :]
    return GoalSchedule(goals, horizon)


def _pass_start(problem: "GpsProblem", surface: Array) -> SimState:
    return SimState(surface, NozzleState(problem.start_position, problem.nozzle_height, 0.0))


@dataclass(frozen=True, eq=False)
class GpsProblem:
    """Everything the iteration steps need besides the evolving GpsState."""

    config: GpsConfig
    model: DepositionModel
    initial_surface: Array
    target: Array
    schedule: GoalSchedule
    dynamics: object
    start_position: float
    nozzle_height: float

    @property
    def n_u(self) -> int:
        return self.dynamics.n_u

    def guide_start_surface(self, guide_index: int) -> Array:
        if guide_index == 0:
            return self.initial_surface
        return self.schedule.goals[guide_index - 1]

    def guide_x0(self, guide_index: int) -> Array:
        return _pass_start(self, self.guide_start_surface(guide_index)).as_vector()


def make_problem(config: GpsConfig, model: DepositionModel, coupon, target) -> GpsProblem:
    coupon = np.asarray(coupon, dtype=float)
    target = np.asarray(target, dtype=float)
    schedule = make_goal_schedule(coupon, target, config.n_guides, config.steps_per_pass)
    start = config.start_position if config.start_position is not None else model.grid.x0
    return GpsProblem(config, model, coupon, target, schedule,
                      model.dynamics(speed_only=config.speed_only), start,
                      config.nozzle_height)


def init_state(config: GpsConfig, problem: GpsProblem) -> GpsState:
    """Zero multipliers, flat penalty weights, a freshly seeded policy and a
    wide (near-uniform) initial policy covariance."""
    n_u = problem.n_u
    horizon = config.steps_per_pass
    grid = problem.model.grid
    fill = float(np.max(problem.target - problem.initial_surface))
    height_scale = fill if fill > 0.0 else 1.0
    position_scale = max(abs(grid.x0), abs(grid.x_end), 1.0)
    init_seed = np.random.SeedSequence(config.seed).spawn(1)[0]
    weights = policy_net.init_weights(
        grid.n_cells + 1, config.n_hidden, n_u,
        config.train.u_min, config.train.u_max,
        seed=init_seed, height_scale=height_scale, position_scale=position_scale)
    span = config.train.u_max - config.train.u_min
    sigma = np.eye(n_u) * span ** 2
    return GpsState(
        guides=[None] * config.n_guides,
        policy=policy_net.PolicyParams(weights, sigma),
        lambdas=np.zeros((config.n_guides, horizon, n_u)),
        nus=np.full(horizon, config.nu_init),
        iteration=0,
    )


# ---------------------------------------------------------------------------
# Iteration steps


def step1_update_guides(state: GpsState, problem: GpsProblem) -> GpsState:
    """Re-solve every guiding controller against the augmented objective,
    warm-started from its previous solution."""
    config = problem.config
    guides = []
    for i in range(config.n_guides):
        per_pass = PerPassCost(problem.schedule.goals[i], config.weights, problem.n_u)
        cost = AugmentedCost(per_pass, state.lambdas[i], state.nus, state.policy)
        try:
            guide = ilqr.solve(problem.guide_x0(i), cost, config.steps_per_pass,
                               problem.dynamics, config.ilqr, warm_start=state.guides[i])
        except Diverged as err:
            raise Diverged(f"guide {i}: {err}") from err
        guides.append(guide)
    return replace_state(state, guides=guides)


def _sample_pass(guide, x0: Array, problem: GpsProblem, rng: np.random.Generator,
                 record=None):
    """Roll one trajectory sampling controls from the guide; optionally
    record visited states and guide means."""
    config = problem.config
    bounds = config.bounds
    n = problem.model.grid.n_cells
    x = x0.copy()
    surface_std = config.noise.surface_std
    for t in range(guide.horizon):
        if record is not None:
            record[0][t] = x
            # what the guide actually commands: its mean saturated at the
            # actuator bounds, which a bounded policy can represent
            record[1][t] = bounds.clip(guide.mean_control(t, x))
        u = guide.sample_control(t, x, rng)
        x = problem.dynamics.step(x, bounds.clip(u))
        if surface_std > 0.0:
            x[:n] += rng.normal(size=n) * surface_std
    return x


def randomize_initial_states(base: SimState, guide_index: int, prev_guides,
                             count: int, noise: NoiseSpec, seed,
                             problem: GpsProblem) -> list[SimState]:
    """Starting states for one guide's sample set.

    Each state is produced by replaying the earlier guides from the base
    coupon with their own sampling noise (nozzle re-homed before every pass),
    then corrupting the surface with measurement noise."""
    rng = np.random.default_rng(seed)
    n = problem.model.grid.n_cells
    states = []
    for _ in range(count):
        x = base.as_vector()
        for guide in prev_guides[:guide_index]:
            x = _sample_pass(guide, _reset_nozzle(x, problem), problem, rng)
        if noise.measurement_std > 0.0:
            x = x.copy()
            x[:n] += rng.normal(size=n) * noise.measurement_std
        states.append(SimState.from_vector(_reset_nozzle(x, problem)))
    return states


def _reset_nozzle(x: Array, problem: GpsProblem) -> Array:
    x = x.copy()
    x[-3:] = (problem.start_position, problem.nozzle_height, 0.0)
    return x


def step2_sample(state: GpsState, problem: GpsProblem, seed) -> GpsDataset:
    """Draw n_samples trajectories per guide, starting from randomized
    initial surfaces, and record the supervision tuples."""
    config = problem.config
    horizon = config.steps_per_pass
    n_u = problem.n_u
    n_x = problem.model.grid.state_dim
    m, n = config.n_guides, config.n_samples

    states = np.empty((m, n, horizon, n_x))
    mu_q = np.empty((m, n, horizon, n_u))
    sigma_q = np.empty((m, horizon, n_u, n_u))

    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_seeds, roll_seeds = root.spawn(2)
    init_children = init_seeds.spawn(m)
    roll_children = roll_seeds.spawn(m)

    base = _pass_start(problem, problem.initial_surface)
    for i in range(m):
        guide = state.guides[i]
        sigma_q[i] = guide.sigma
        inits = randomize_initial_states(base, i, state.guides, n, config.noise,
                                         init_children[i], problem)
        rng = np.random.default_rng(roll_children[i])
        for j in range(n):
            record = (states[i, j], mu_q[i, j])
            _sample_pass(guide, inits[j].as_vector(), problem, rng, record=record)

    return GpsDataset(states, mu_q, sigma_q, state.nus.copy(), state.lambdas.copy())


def training_batch(dataset: GpsDataset, weights: policy_net.MlpWeights) -> policy_net.TrainingBatch:
    """Flatten the dataset into per-sample supervision tuples."""
    m, n, horizon, n_x = dataset.states.shape
    n_u = dataset.mu_q.shape[-1]
    nd = n_x - 3

    flat_states = dataset.states.reshape(-1, n_x)
    feats = np.concatenate(
        [flat_states[:, :nd] / weights.height_scale,
         flat_states[:, nd:nd + 1] / weights.position_scale], axis=1)
    targets = dataset.mu_q.reshape(-1, n_u)

    precisions = np.linalg.inv(dataset.sigma_q)         # (M, T, n_u, n_u)
    prec = np.broadcast_to(precisions[:, None], (m, n, horizon, n_u, n_u)).reshape(-1, n_u, n_u)
    nus = np.broadcast_to(dataset.nus[None, None, :], (m, n, horizon)).reshape(-1)
    lams = np.broadcast_to(dataset.lambdas[:, None], (m, n, horizon, n_u)).reshape(-1, n_u)
    return policy_net.TrainingBatch(feats, targets, prec.copy(), nus.copy(), lams.copy())


def step3_train_policy(state: GpsState, dataset: GpsDataset, problem: GpsProblem) -> GpsState:
    """Fit the policy mean to the sampled guide means and refresh the policy
    covariance from the guide precisions."""
    config = problem.config
    batch = training_batch(dataset, state.policy.weights)
    weights = policy_net.train(state.policy.weights, batch, config.train)
    sigma = policy_net.policy_covariance(state.guides)
    return replace_state(state, policy=policy_net.PolicyParams(weights, sigma))


def _policy_means(dataset: GpsDataset, weights: policy_net.MlpWeights) -> Array:
    m, n, horizon, n_x = dataset.states.shape
    nd = n_x - 3
    flat = dataset.states.reshape(-1, n_x)
    feats = np.concatenate([flat[:, :nd] / weights.height_scale,
                            flat[:, nd:nd + 1] / weights.position_scale], axis=1)
    return policy_net.forward(weights, feats).reshape(m, n, horizon, -1)


def mean_gap(dataset: GpsDataset, policy: policy_net.PolicyParams) -> Array:
    """Per-(guide, step) sample mean of (policy mean - guide mean)."""
    mu_pi = _policy_means(dataset, policy.weights)
    return (mu_pi - dataset.mu_q).mean(axis=1)  # (M, T, n_u)


def constraint_residual(dataset: GpsDataset, policy: policy_net.PolicyParams) -> float:
    """Mean norm of the first-moment mismatch between policy and guides."""
    gap = mean_gap(dataset, policy)
    return float(np.linalg.norm(gap, axis=-1).mean())


def step4_update_multipliers(state: GpsState, dataset: GpsDataset,
                             problem: GpsProblem) -> GpsState:
    """Dual ascent on the first-moment constraint:
    lambda_it += dual_step * nu_t * mean_j(mu_pi - mu_q)."""
    config = problem.config
    gap = mean_gap(dataset, state.policy)
    lambdas = state.lambdas + config.dual_step * state.nus[None, :, None] * gap
    return replace_state(state, lambdas=lambdas)


def kl_per_step(dataset: GpsDataset, policy: policy_net.PolicyParams) -> Array:
    """Sampled KL(q_i || pi) averaged over guides and samples, per step."""
    sigma_pi = np.asarray(policy.sigma, dtype=float)
    n_u = sigma_pi.shape[0]
    prec_pi = np.linalg.inv(sigma_pi)
    logdet_pi = float(np.linalg.slogdet(sigma_pi)[1])

    mu_pi = _policy_means(dataset, policy.weights)
    diff = mu_pi - dataset.mu_q                            # (M, N, T, n_u)
    maha = np.einsum("mnti,ij,mntj->mnt", diff, prec_pi, diff)

    trace = np.einsum("ij,mtji->mt", prec_pi, dataset.sigma_q)
    logdet_q = np.linalg.slogdet(dataset.sigma_q)[1]       # (M, T)
    per_guide = 0.5 * (trace + maha.mean(axis=1) - n_u + logdet_pi - logdet_q)
    return per_guide.mean(axis=0)


def adjust_penalties(state: GpsState, kl: Array, config: GpsConfig) -> GpsState:
    """Scale nu_t up where the step KL runs above the band around the median
    step KL, down where below, clamped to the configured range."""
    kl = np.asarray(kl, dtype=float)
    med = float(np.median(kl))
    if med <= 0.0:
        return state
    lo, hi = config.kl_band
    factors = np.where(kl > hi * med, config.nu_factor_up,
                       np.where(kl < lo * med, config.nu_factor_down, 1.0))
    nus = np.clip(state.nus * factors, config.nu_min, config.nu_max)
    return replace_state(state, nus=nus)


def replace_state(state: GpsState, **kwargs) -> GpsState:
    return replace(state, iteration=kwargs.pop("iteration", state.iteration), **kwargs)


# ---------------------------------------------------------------------------
# Outer loop


def run(config: GpsConfig, model: DepositionModel, coupon, target):
    """Run the full alternation for n_iterations (or until the mean control
    mismatch drops below the convergence threshold) and return the trained
    policy with per-iteration diagnostics."""
    problem = make_problem(config, model, coupon, target)
    state = init_state(config, problem)

    root = np.random.SeedSequence(config.seed)
    iter_seeds = root.spawn(config.n_iterations + 1)[1:]
    span = config.train.u_max - config.train.u_min
    threshold = config.convergence_rtol * span

    history = []
    converged = False
    for k in range(config.n_iterations):
        state = step1_update_guides(state, problem)
        dataset = step2_sample(state, problem, iter_seeds[k])
        state = step3_train_policy(state, dataset, problem)
        state = step4_update_multipliers(state, dataset, problem)

        residual = constraint_residual(dataset, state.policy)
        kl = kl_per_step(dataset, state.policy)
        batch = training_batch(dataset, state.policy.weights)
        policy_loss = policy_net.loss_and_grad(state.policy.weights, batch)[0]
        guide_costs = [
            trajectory_cost(PerPassCost(problem.schedule.goals[i], config.weights, problem.n_u),
                            g.nominal_states, g.nominal_controls)
            for i, g in enumerate(state.guides)
        ]
        history.append({
            "iteration": k,
            "guide_costs": guide_costs,
            "policy_loss": float(policy_loss),
            "kl_per_step": kl.tolist(),
            "residual": residual,
            "nu": state.nus.tolist(),
            "lambda_norm": float(np.linalg.norm(state.lambdas)),
        })

        state = adjust_penalties(state, kl, config)
        state = replace_state(state, iteration=k + 1)
        if residual < threshold:
            converged = True
            break

    return state.policy, GpsDiagnostics(history, converged, state.guides, problem.schedule)
