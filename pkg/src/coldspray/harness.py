"""Closed-loop per-pass evaluation with baselines and material metrics.

Deployment protocol: before each pass the true surface is measured (with
noise), the whole next pass's speed sequence is planned by propagating the
nominal model, and that sequence is executed open loop on the true plant.
Only the traverse speed is commanded; height and tilt stay fixed.  Runs stop
at the pass budget or once the worst remaining underfill drops below the
fill tolerance, whichever comes first; material above the target counts as
scrap but never blocks completion, mirroring a repair that gets machined
flush afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import policy as policy_net
from .errors import IncompatibleCheckpoint, NegativeDeposit
from .model import (
    CouponSpec,
    DepositionModel,
    GridSpec,
    NoiseSpec,
    coupon_target,
    make_coupon,
    step_states,
)

Array = np.ndarray


@dataclass(frozen=True)
class ConstantSpeed:
    """Open-loop baseline: the same speed everywhere, every pass."""

    speed: float = 1.0
    name: str = "constant"


@dataclass(frozen=True, eq=False)
class VaryingSpeed:
    """Open-loop baseline: speed looked up from a position-indexed table
    (piecewise linear, flat extension beyond the end knots)."""

    positions: Array
    speeds: Array
    name: str = "varying"

    def lookup(self, position: float) -> float:
        return float(np.interp(position, self.positions, self.speeds))


def default_varying_profile(grid: GridSpec, coupon: CouponSpec, fast: float = 5.0,
                            slow: float = 1.0, ramp_cells: int = 10) -> VaryingSpeed:
    """Fast over the flat regions, slow over the notch, linear ramps between."""
    center = coupon.center_mm if coupon.center_mm is not None else (grid.x0 + grid.x_end) / 2.0
    half = coupon.top_width_mm / 2.0
    ramp = max(ramp_cells * grid.dx, grid.dx)
    positions = np.array([center - half - ramp, center - half, center + half, center + half + ramp])
    speeds = np.array([fast, slow, slow, fast])
    return VaryingSpeed(positions, speeds)


@dataclass(eq=False)
class RunConfig:
    model_true: DepositionModel
    model_nominal: DepositionModel
    coupon: CouponSpec
    nozzle_height: float
    noise: NoiseSpec = NoiseSpec()
    max_passes: int = 12
    fill_tolerance: float = 0.1
    max_steps_per_pass: int = 2000
    seed: int = 0
    start_position: float | None = None
    controller: object | None = None
    target: Array | None = None
    # Policy passes run a fixed number of steps (the horizon the policy was
    # trained on); baseline passes end when the nozzle reaches the far edge.
    steps_per_pass: int | None = None

    def __post_init__(self):
        if self.max_passes < 1:
            raise ValueError("max_passes must be at least 1")
        if self.fill_tolerance <= 0.0:
            raise ValueError("fill_tolerance must be positive")

    @property
    def grid(self) -> GridSpec:
        return self.model_true.grid

    def start(self) -> float:
        return self.grid.x0 if self.start_position is None else self.start_position

    def goal_profile(self) -> Array:
        if self.target is not None:
            return np.asarray(self.target, dtype=float)
        return coupon_target(self.coupon, self.grid)


@dataclass(eq=False)
class RunReport:
    controller: str
    seed: int
    passes_executed: int
    tolerance_met: bool
    terminal_rmse: float
    final_underfill: float
    material: float
    per_pass_material: list
    speed_profiles: list
    measured_surfaces: list
    initial_surface: Array
    final_surface: Array

    def to_dict(self) -> dict:
        return {
            "controller": self.controller,
            "seed": self.seed,
            "passes_executed": self.passes_executed,
            "tolerance_met": self.tolerance_met,
            "terminal_rmse_mm": self.terminal_rmse,
            "final_underfill_mm": self.final_underfill,
            "material_volume_mm3_per_mm": self.material,
            "per_pass_material": self.per_pass_material,
            "speed_profiles": self.speed_profiles,
            "measured_surfaces": [list(map(float, s)) for s in self.measured_surfaces],
            "initial_surface": list(map(float, self.initial_surface)),
            "final_surface": list(map(float, self.final_surface)),
        }


def material_volume(initial, final, grid: GridSpec) -> float:
    """Deposited cross-section area: dx times the summed height increase."""
    initial = np.asarray(initial, dtype=float)
    final = np.asarray(final, dtype=float)
    diff = final - initial
    if diff.min() < -1e-9:
        raise NegativeDeposit(f"final profile dips {-diff.min():.3g} mm below the initial one")
    return float(grid.dx * diff.sum())


def underfill(surface, target) -> float:
    """Worst remaining deficit below the target (overbuild ignored)."""
    return float(np.maximum(np.asarray(target) - np.asarray(surface), 0.0).max())


def savings_fraction(material_baseline: float, material_test: float) -> float:
    """Fraction of the baseline's material avoided by the test run."""
    return (material_baseline - material_test) / material_baseline


def rmse(surface, target) -> float:
    diff = np.asarray(surface, dtype=float) - np.asarray(target, dtype=float)
    return float(np.sqrt(np.mean(diff * diff)))


# ---------------------------------------------------------------------------
# Pass planning and execution


def _plan_constant(config: RunConfig, spec: ConstantSpeed) -> list:
    distance = config.grid.x_end - config.start()
    steps = max(1, math.ceil(distance / (spec.speed * config.grid.dt) - 1e-12))
    return [spec.speed] * min(steps, config.max_steps_per_pass)


def _plan_varying(config: RunConfig, spec: VaryingSpeed) -> list:
    speeds = []
    p = config.start()
    end = config.grid.x_end
    while p < end - 1e-9 and len(speeds) < config.max_steps_per_pass:
        v = spec.lookup(p)
        speeds.append(v)
        p += v * config.grid.dt
    return speeds


def _plan_policy(config: RunConfig, weights: policy_net.MlpWeights, measured: Array) -> list:
    """Propagate the nominal model from the measured surface, querying the
    policy at each predicted state for the next speed.

    The pass length is steps_per_pass when set (matching the horizon the
    policy was trained on), otherwise a full traverse of the domain."""
    grid = config.grid
    n = grid.n_cells
    x = np.concatenate([measured, [config.start(), config.nozzle_height, 0.0]])
    eps_h = 0.1 * (config.nozzle_height - float(measured.max()))
    speeds = []
    end = grid.x_end
    params = config.model_nominal.params
    limit = config.steps_per_pass if config.steps_per_pass else config.max_steps_per_pass
    while len(speeds) < limit:
        if config.steps_per_pass is None and x[n] >= end - 1e-9:
            break
        v = float(policy_net.state_mean(weights, x[:n], x[n])[0])
        speeds.append(v)
        x = step_states(x, np.array([v, 0.0, 0.0]), grid, params, eps_h)
    return speeds


def _execute_pass(config: RunConfig, surface: Array, speeds, rng) -> Array:
    """Run a planned speed sequence on the true plant, with optional
    execution noise on the commanded speed."""
    grid = config.grid
    n = grid.n_cells
    x = np.concatenate([surface, [config.start(), config.nozzle_height, 0.0]])
    eps_h = 0.1 * (config.nozzle_height - float(surface.max()))
    exec_std = config.noise.control_std
    params = config.model_true.params
    for v in speeds:
        if exec_std:
            v = v + rng.normal() * exec_std
        x = step_states(x, np.array([v, 0.0, 0.0]), grid, params, eps_h)
    return x[:n]


def _run_passes(config: RunConfig, plan, label: str, disturbance=None) -> RunReport:
    grid = config.grid
    target = config.goal_profile()
    surface = make_coupon(config.coupon, grid)
    initial = surface.copy()
    rng = np.random.default_rng(config.seed)
    meas_std = config.noise.measurement_std

    speed_profiles = []
    measured_surfaces = []
    per_pass_material = []
    tolerance_met = False

    for pass_index in range(config.max_passes):
        measured = surface.copy()
        if meas_std > 0.0:
            measured += rng.normal(size=grid.n_cells) * meas_std
        measured_surfaces.append(measured)
        if underfill(measured, target) <= config.fill_tolerance:
            tolerance_met = True
            break
        speeds = plan(measured, pass_index)
        if disturbance is not None:
            surface = np.asarray(disturbance(pass_index, surface), dtype=float)
        before = surface
        surface = _execute_pass(config, surface, speeds, rng)
        speed_profiles.append([float(v) for v in speeds])
        per_pass_material.append(material_volume(before, surface, grid))
    else:
        measured = surface.copy()
        if meas_std > 0.0:
            measured += rng.normal(size=grid.n_cells) * meas_std
        measured_surfaces.append(measured)
        tolerance_met = underfill(measured, target) <= config.fill_tolerance

    return RunReport(
        controller=label,
        seed=config.seed,
        passes_executed=len(speed_profiles),
        tolerance_met=tolerance_met,
        terminal_rmse=rmse(surface, target),
        final_underfill=underfill(surface, target),
        material=material_volume(initial, surface, grid),
        per_pass_material=per_pass_material,
        speed_profiles=speed_profiles,
        measured_surfaces=measured_surfaces,
        initial_surface=initial,
        final_surface=surface,
    )


# ---------------------------------------------------------------------------
# Public runs


def closed_loop_run(config: RunConfig, policy: policy_net.PolicyParams,
                    disturbance=None) -> RunReport:
    """Per-pass feedback with the trained policy: measure, plan the next
    pass on the nominal model, execute it on the true plant."""
    weights = policy.weights
    if weights.n_in != config.grid.n_cells + 1:
        raise IncompatibleCheckpoint(
            f"policy expects {weights.n_in} inputs, grid provides {config.grid.n_cells + 1}")

    def plan(measured, pass_index):
        return _plan_policy(config, weights, measured)

    return _run_passes(config, plan, "gpsc", disturbance)


def baseline_run(config: RunConfig, controller=None, disturbance=None) -> RunReport:
    """Open-loop constant-speed or varying-speed baseline under the same
    stopping rule and metrics as the closed loop."""
    controller = controller if controller is not None else config.controller
    if isinstance(controller, ConstantSpeed):
        def plan(measured, pass_index):
            return _plan_constant(config, controller)
    elif isinstance(controller, VaryingSpeed):
        def plan(measured, pass_index):
            return _plan_varying(config, controller)
    else:
        raise ValueError(f"unsupported baseline controller {controller!r}")
    return _run_passes(config, plan, controller.name, disturbance)


def compare_runs(config: RunConfig, policy: policy_net.PolicyParams,
                 constant: ConstantSpeed | None = None,
                 varying: VaryingSpeed | None = None) -> dict:
    """Paired runs of the policy and both baselines plus a savings table."""
    constant = constant or ConstantSpeed()
    varying = varying or default_varying_profile(config.grid, config.coupon)
    gpsc = closed_loop_run(config, policy)
    const_report = baseline_run(config, constant)
    vary_report = baseline_run(config, varying)
    table = []
    for report in (gpsc, const_report, vary_report):
        row = {
            "controller": report.controller,
            "material_volume_mm3_per_mm": report.material,
            "passes": report.passes_executed,
            "terminal_rmse_mm": report.terminal_rmse,
            "tolerance_met": report.tolerance_met,
        }
        if report is not gpsc:
            row["gpsc_savings_fraction"] = savings_fraction(report.material, gpsc.material)
        table.append(row)
    return {"gpsc": gpsc, "constant": const_report, "varying": vary_report,
            "savings_table": table}
