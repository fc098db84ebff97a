"""Discrete-time model of powder deposition from a traversing spray nozzle.

A 1-D surface height profile grows under a spray cone whose footprint and
sticking efficiency depend on the nozzle pose and the local surface slope.
The state bundles the per-cell heights with the nozzle position, standoff
height and tilt; controls are the nozzle's linear and angular speeds.

Everything here is a pure function of its inputs (seeds passed explicitly),
so rollouts are reproducible and safe to evaluate in parallel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ClearanceViolation, InvalidGeometry

Array = np.ndarray

# Hard clearance floor, as a fraction of the gap between the nozzle and the
# highest surface point at the start of a maneuver.  The spray geometry
# degenerates as the gap closes (the impact angle becomes singular), and a
# physical nozzle never touches the part.
CLEARANCE_FRACTION = 0.1


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class GridSpec:
    """Spatial discretization and time step.

    x0 is the leftmost cell center (mm), dx the cell size (mm), n_cells the
    number of cells, dt the integration step (s).
    """

    x0: float
    dx: float
    n_cells: int
    dt: float

    def __post_init__(self):
        if self.dx <= 0.0:
            raise ValueError("cell size dx must be positive")
        if self.dt <= 0.0:
            raise ValueError("time step dt must be positive")
        if self.n_cells < 2:
            raise ValueError("need at least 2 cells")

    @property
    def cell_centers(self) -> Array:
        return self.x0 + self.dx * np.arange(self.n_cells)

    @property
    def x_end(self) -> float:
        return self.x0 + self.dx * (self.n_cells - 1)

    @property
    def state_dim(self) -> int:
        return self.n_cells + 3


@dataclass(frozen=True)
class ModelParams:
    """Spray parameters: cone width (rho), efficiency falloff steepness (a),
    efficiency plateau half-width (b), inverse rate gain (c) and falloff
    exponent (kappa).  All strictly positive."""

    rho: float
    a: float
    b: float
    c: float
    kappa: float

    def __post_init__(self):
        for name in ("rho", "a", "b", "c", "kappa"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")

    def as_array(self) -> Array:
        return np.array([self.rho, self.a, self.b, self.c, self.kappa])

    @classmethod
    def from_array(cls, values) -> "ModelParams":
        rho, a, b, c, kappa = (float(v) for v in values)
        return cls(rho, a, b, c, kappa)


@dataclass(frozen=True)
class NozzleState:
    """Nozzle pose: lateral position (mm), height (mm), tilt (rad)."""

    position: float
    height: float
    angle: float = 0.0


@dataclass(frozen=True, eq=False)
class SimState:
    """Surface profile plus nozzle pose."""

    surface: Array
    nozzle: NozzleState

    def __post_init__(self):
        object.__setattr__(self, "surface", np.asarray(self.surface, dtype=float))

    def as_vector(self) -> Array:
        n = self.nozzle
        return np.concatenate([self.surface, [n.position, n.height, n.angle]])

    @classmethod
    def from_vector(cls, x) -> "SimState":
        x = np.asarray(x, dtype=float)
        return cls(x[:-3].copy(), NozzleState(float(x[-3]), float(x[-2]), float(x[-1])))


@dataclass(frozen=True)
class ControlBounds:
    """Componentwise bounds on nozzle speeds and angular rate."""

    vx_min: float = 0.0
    vx_max: float = 5.0
    vh_min: float = 0.0
    vh_max: float = 0.0
    omega_min: float = 0.0
    omega_max: float = 0.0

    def __post_init__(self):
        if self.vx_min > self.vx_max or self.vh_min > self.vh_max or self.omega_min > self.omega_max:
            raise ValueError("lower bounds must not exceed upper bounds")

    def lower(self, n_u: int = 3) -> Array:
        return np.array([self.vx_min, self.vh_min, self.omega_min])[:n_u]

    def upper(self, n_u: int = 3) -> Array:
        return np.array([self.vx_max, self.vh_max, self.omega_max])[:n_u]

    def clip(self, u: Array) -> Array:
        n_u = np.shape(u)[-1]
        return np.clip(u, self.lower(n_u), self.upper(n_u))


@dataclass(frozen=True)
class NoiseSpec:
    """Amplitudes for the stochastic parts of a rollout.

    control_std perturbs the executed controls per step (scalar or one value
    per control), surface_std adds per-cell process noise to the surface per
    step, measurement_std corrupts surface measurements between passes.
    """

    control_std: float = 0.0
    surface_std: float = 0.0
    measurement_std: float = 0.0

    def control_sigmas(self, n_u: int = 3) -> Array:
        return np.broadcast_to(np.asarray(self.control_std, dtype=float), (n_u,))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States x_0..x_T (rows) and the controls executed between them."""

    states: Array    # (T+1, n_cells+3)
    controls: Array  # (T, n_u)

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    def surfaces(self) -> Array:
        return self.states[:, :-3]


@dataclass(frozen=True)
class CouponSpec:
    """Flat test piece with a symmetric trapezoidal notch.

    depth_mm is the notch depth below the flat level, top_width_mm the width
    of the notch opening at the flat level, wall_angle_deg the wall slope
    (90 means vertical walls).  center_mm defaults to the domain center.
    """

    depth_mm: float
    top_width_mm: float
    wall_angle_deg: float = 45.0
    center_mm: float | None = None


# ---------------------------------------------------------------------------
# Shape functions


def spray_shape(z, rho: float):
    """Cone flux profile rho / (rho + z^2); equals 1 on the spray axis.

    Written in the pole-free algebraic form so z = 0 needs no special case.
    """
    if rho <= 0.0:
        raise ValueError("rho must be strictly positive")
    z = np.asarray(z, dtype=float)
    out = rho / (rho + z * z)
    return out if out.ndim else float(out)


def efficiency(z, params: ModelParams):
    """Deposition efficiency vs. impact-angle tangent: constant for |z| <= b,
    decaying to zero beyond, scaled by 1/c."""
    z = np.asarray(z, dtype=float)
    arg = np.maximum(np.abs(z / params.b) ** params.kappa, 1.0)
    out = (0.5 + np.arctan(-params.a * arg) / np.pi) / params.c
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Dynamics core (batched over leading axes)


def _surface_slope(d: Array, dx: float) -> Array:
    edge = 2 if d.shape[-1] >= 3 else 1
    return np.gradient(d, dx, axis=-1, edge_order=edge)


def _check_clearance(gap: Array, eps_h: float) -> None:
    lo = float(gap.min())
    if lo <= 0.0 or lo < eps_h:
        raise ClearanceViolation(
            f"nozzle-to-surface gap {lo:.6g} mm below clearance margin {eps_h:.6g} mm"
        )


def _rate_core(d, p, h, alpha, grid: GridSpec, params, eps_h: float) -> Array:
    """Per-cell deposition rate for batched states.

    d has shape (..., n_cells); p, h, alpha shape (...).  params may carry
    scalar fields or arrays broadcastable against the batch (used by the
    calibration code to probe many parameter vectors at once).
    """
    d = np.asarray(d, dtype=float)
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    alpha = np.asarray(alpha, dtype=float)

    gap = h[..., None] - d
    _check_clearance(gap, eps_h)

    cells = grid.cell_centers
    tan_beta = (cells - p[..., None]) / gap
    slope = _surface_slope(d, grid.dx)

    # Tangent of the angle between the spray ray and the local surface
    # tangent; the denominator vanishes at grazing incidence, where the
    # efficiency tends to zero anyway, so clamp it away from the pole.
    den = 1.0 + tan_beta * slope
    den = np.where(np.abs(den) < 1e-12, np.copysign(1e-12, den), den)
    impact = (tan_beta - slope) / den

    return spray_shape(tan_beta - np.tan(alpha)[..., None], params.rho) * efficiency(
        impact, params
    )


def step_states(x, u, grid: GridSpec, params, eps_h: float) -> Array:
    """One explicit-Euler step of the full state map, batched.

    x has shape (..., n_cells+3) laid out [heights..., p, h, alpha]; u has
    shape (..., 3).  Surface cells accumulate rate*dt; the nozzle pose
    integrates its speeds exactly.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = grid.n_cells
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, batch + (n + 3,))
    u = np.broadcast_to(u, batch + (3,))

    g = _rate_core(x[..., :n], x[..., n], x[..., n + 1], x[..., n + 2], grid, params, eps_h)

    out = np.empty_like(x)
    out[..., :n] = x[..., :n] + g * grid.dt
    out[..., n:] = x[..., n:] + u * grid.dt
    return out


def default_clearance(state: SimState) -> float:
    """Clearance margin frozen at the start of a maneuver: a fixed fraction
    of the initial nozzle-to-surface gap."""
    return CLEARANCE_FRACTION * (state.nozzle.height - float(np.max(state.surface)))


def _state_vector(state) -> Array:
    if isinstance(state, SimState):
        return state.as_vector()
    return np.asarray(state, dtype=float)


# ---------------------------------------------------------------------------
# Public operations


def deposition_rate(state: SimState, grid: GridSpec, params: ModelParams,
                    eps_h: float | None = None) -> Array:
    """Instantaneous deposition rate (mm/s) at every cell."""
    if eps_h is None:
        eps_h = default_clearance(state)
    n = state.nozzle
    return _rate_core(state.surface, n.position, n.height, n.angle, grid, params, eps_h)


def step(state: SimState, u, grid: GridSpec, params: ModelParams,
         eps_h: float | None = None) -> SimState:
    """Advance the state by one time step under control u = (vx, vh, omega)."""
    if eps_h is None:
        eps_h = default_clearance(state)
    x = step_states(state.as_vector(), np.asarray(u, dtype=float), grid, params, eps_h)
    return SimState.from_vector(x)


def rollout(x0: SimState, controls, grid: GridSpec, params: ModelParams,
            noise: NoiseSpec | None = None, seed: int | None = None) -> Trajectory:
    """Run an open-loop control sequence from x0.

    With a NoiseSpec, controls are perturbed and per-cell surface noise is
    added each step; both draws come from a single generator seeded with
    `seed`, so results are reproducible.  The returned controls are the ones
    actually executed.  Failures carry the index of the offending step.
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, 3) if np.size(controls) else \
        np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    eps_h = default_clearance(x0)
    n = grid.n_cells

    ctrl_sigma = noise.control_sigmas() if noise is not None else None
    draw_ctrl = noise is not None and np.any(ctrl_sigma > 0.0)
    draw_surf = noise is not None and noise.surface_std > 0.0

    x = x0.as_vector()
    states = [x]
    executed = np.empty_like(controls)
    for t, u in enumerate(controls):
        if draw_ctrl:
            u = u + rng.normal(size=3) * ctrl_sigma
        try:
            x = step_states(x, u, grid, params, eps_h)
        except ClearanceViolation as err:
            raise ClearanceViolation(f"step {t}: {err}") from err
        if draw_surf:
            x = x.copy()
            x[:n] += rng.normal(size=n) * noise.surface_std
        states.append(x)
        executed[t] = u
    return Trajectory(np.asarray(states), executed)


def linearize_dynamics(state, u, grid: GridSpec, params: ModelParams,
                       h_fd: float = 1e-5, eps_h: float | None = None):
    """Jacobians A = df/dx and B = df/du by central finite differences.

    The probe step for each coordinate is h_fd * (1 + |value|).  Raises
    ClearanceViolation if any probe point violates the clearance margin.
    """
    x = _state_vector(state)
    u = np.asarray(u, dtype=float)
    if eps_h is None:
        eps_h = CLEARANCE_FRACTION * (x[-2] - float(np.max(x[:-3])))
    n, m = x.size, u.size

    hx = h_fd * (1.0 + np.abs(x))
    probes = np.concatenate([x + np.diag(hx), x - np.diag(hx)])
    fx = step_states(probes, u, grid, params, eps_h)
    a_mat = ((fx[:n] - fx[n:]) / (2.0 * hx[:, None])).T

    hu = h_fd * (1.0 + np.abs(u))
    probes_u = np.concatenate([u + np.diag(hu), u - np.diag(hu)])
    fu = step_states(x, probes_u, grid, params, eps_h)
    b_mat = ((fu[:m] - fu[m:]) / (2.0 * hu[:, None])).T
    return a_mat, b_mat


def make_coupon(spec: CouponSpec, grid: GridSpec) -> Array:
    """Surface heights for a flat coupon with a symmetric trapezoidal notch.

    The notch bottom sits at height 0 and the flat level at depth_mm, so
    heights are nonnegative and "filled" means raised to the flat level.
    """
    if spec.depth_mm < 0.0:
        raise InvalidGeometry("notch depth must be nonnegative")
    if spec.depth_mm == 0.0:
        return np.zeros(grid.n_cells)
    if not 0.0 < spec.wall_angle_deg <= 90.0:
        raise InvalidGeometry("wall angle must lie in (0, 90] degrees")
    domain = grid.x_end - grid.x0
    if spec.top_width_mm <= 0.0 or spec.top_width_mm >= domain:
        raise InvalidGeometry("notch width must be positive and smaller than the domain")

    half = spec.top_width_mm / 2.0
    if spec.wall_angle_deg == 90.0:
        run = 0.0
    else:
        run = spec.depth_mm / math.tan(math.radians(spec.wall_angle_deg))
    if 2.0 * run > spec.top_width_mm:
        raise InvalidGeometry("walls are too shallow to reach the stated depth")

    center = spec.center_mm if spec.center_mm is not None else (grid.x0 + grid.x_end) / 2.0
    r = np.abs(grid.cell_centers - center)
    if run > 0.0:
        drop = np.clip((half - r) / run, 0.0, 1.0) * spec.depth_mm
    else:
        drop = np.where(r <= half, spec.depth_mm, 0.0)
    return spec.depth_mm - drop


def coupon_target(spec: CouponSpec, grid: GridSpec) -> Array:
    """Goal profile for a repaired coupon: uniform at the flat level."""
    return np.full(grid.n_cells, spec.depth_mm)


def add_measurement_noise(profile: Array, sigma: float, seed: int | None = None) -> Array:
    """Per-cell zero-mean Gaussian measurement noise, reproducible by seed."""
    if sigma < 0.0:
        raise ValueError("sigma must be nonnegative")
    profile = np.asarray(profile, dtype=float)
    if sigma == 0.0:
        return profile.copy()
    rng = np.random.default_rng(seed)
    return profile + rng.normal(size=profile.shape) * sigma


# ---------------------------------------------------------------------------
# Model bundle and the vector-space adapter used by trajectory optimization


@dataclass(frozen=True)
class DepositionModel:
    """Grid plus spray parameters; the unit most callers pass around."""

    grid: GridSpec
    params: ModelParams

    def dynamics(self, speed_only: bool = False, eps_h: float | None = None) -> "DepositionDynamics":
        return DepositionDynamics(self.grid, self.params, speed_only, eps_h)


@dataclass(frozen=True)
class DepositionDynamics:
    """Flat-vector view of the model for optimizers.

    States are raw vectors [heights..., p, h, alpha].  In speed_only mode the
    control is the scalar traverse speed and the height/tilt rates are pinned
    to zero, matching deployment where only the nozzle speed is commanded.
    """

    grid: GridSpec
    params: ModelParams
    speed_only: bool = False
    eps_h: float | None = None

    @property
    def n_x(self) -> int:
        return self.grid.state_dim

    @property
    def n_u(self) -> int:
        return 1 if self.speed_only else 3

    def full_control(self, u) -> Array:
        u = np.asarray(u, dtype=float)
        if self.speed_only:
            out = np.zeros(u.shape[:-1] + (3,))
            out[..., 0] = u[..., 0]
            return out
        return u

    def _margin(self, x) -> float:
        if self.eps_h is not None:
            return self.eps_h
        x = np.asarray(x, dtype=float)
        n = self.grid.n_cells
        return CLEARANCE_FRACTION * float((x[..., n + 1] - x[..., :n].max(axis=-1)).min())

    def step(self, x, u) -> Array:
        return step_states(x, self.full_control(u), self.grid, self.params, self._margin(x))

    def linearize(self, x, u):
        a_mat, b_mat = linearize_dynamics(
            x, self.full_control(u), self.grid, self.params, eps_h=self._margin(x)
        )
        return (a_mat, b_mat[:, :1]) if self.speed_only else (a_mat, b_mat)


# ---------------------------------------------------------------------------
# Profile I/O


def write_profile_csv(path, heights: Array) -> None:
    """One-column CSV of surface heights with a `height_mm` header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["height_mm"])
        for value in np.asarray(heights, dtype=float):
            writer.writerow([repr(float(value))])


def read_profile_csv(path) -> Array:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["height_mm"]:
            raise ValueError(f"unexpected profile header {header!r}")
        return np.array([float(row[0]) for row in reader])
