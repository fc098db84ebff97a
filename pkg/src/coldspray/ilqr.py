"""Entropy-regularized iterative LQR.

Produces time-varying linear-Gaussian controllers: feedback gains and
feedforward from the usual Riccati-style recursion on the quadratized
problem, with the control covariance set to the inverse stage Hessian, which
is the optimizer of the entropy-augmented objective for linear-quadratic
stages.  Robustness comes from Levenberg-style regularization of the control
Hessian plus a backtracking line search on the feedforward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .costs import trajectory_cost
from .errors import Diverged, NotPositiveDefinite
from .model import ControlBounds

Array = np.ndarray


@dataclass(frozen=True)
class ILqrConfig:
    max_iters: int = 50
    cost_tol: float = 1e-6
    reg_init: float = 0.0
    reg_min: float = 1e-9
    reg_max: float = 1e8
    line_search_backtracks: int = 10
    control_bounds: ControlBounds | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0.0 < self.reg_min <= self.reg_max:
            raise ValueError("regularization bounds must satisfy 0 < reg_min <= reg_max")


@dataclass(eq=False)
class LinearGaussianController:
    """Per-step gains K_t, feedforward k_t and control covariance around a
    nominal trajectory; the mean control at state x and step t is
    u_nom_t + k_t + K_t (x - x_nom_t)."""

    gains: Array           # (T, n_u, n_x)
    feedforward: Array     # (T, n_u)
    sigma: Array           # (T, n_u, n_u)
    nominal_states: Array  # (T+1, n_x)
    nominal_controls: Array  # (T, n_u)

    @property
    def horizon(self) -> int:
        return self.nominal_controls.shape[0]

    @property
    def n_u(self) -> int:
        return self.nominal_controls.shape[1]

    def mean_control(self, t: int, x) -> Array:
        dx = np.asarray(x, dtype=float) - self.nominal_states[t]
        return self.nominal_controls[t] + self.feedforward[t] + self.gains[t] @ dx

    def sample_control(self, t: int, x, rng: np.random.Generator) -> Array:
        chol = np.linalg.cholesky(self.sigma[t])
        return self.mean_control(t, x) + chol @ rng.normal(size=self.n_u)

    def to_dict(self) -> dict:
        return {
            "gains": self.gains.tolist(),
            "feedforward": self.feedforward.tolist(),
            "sigma": self.sigma.tolist(),
            "nominal_states": self.nominal_states.tolist(),
            "nominal_controls": self.nominal_controls.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "LinearGaussianController":
        return cls(*(np.array(payload[k]) for k in
                     ("gains", "feedforward", "sigma", "nominal_states", "nominal_controls")))

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> "LinearGaussianController":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class LinearDynamics:
    """x' = A x + B u; handy for verifying the solver against closed-form
    finite-horizon recursions."""

    a: Array
    b: Array

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]

    def step(self, x, u) -> Array:
        return self.a @ np.asarray(x, dtype=float) + self.b @ np.asarray(u, dtype=float)

    def linearize(self, x, u):
        return self.a.copy(), self.b.copy()


@dataclass(eq=False)
class BackwardPassResult:
    gains: Array
    feedforward: Array
    sigma: Array
    dv1: float  # sum_t k'Qu
    dv2: float  # sum_t 0.5 k'Quu k

    def expected_decrease(self, scale: float = 1.0) -> float:
        return -(scale * self.dv1 + scale * scale * self.dv2)


def backward_pass(states: Array, controls: Array, linearizations, expansions,
                  terminal_expansion, reg: float = 0.0) -> BackwardPassResult:
    """Riccati-style recursion on the quadratized stages.

    Returns gains, feedforward and the entropy-optimal covariance
    inv(Quu + reg I) per step.  Raises NotPositiveDefinite when the
    regularized control Hessian fails its Cholesky factorization, which the
    caller handles by raising reg.
    """
    horizon, n_u = controls.shape
    n_x = states.shape[1]
    gains = np.empty((horizon, n_u, n_x))
    feedforward = np.empty((horizon, n_u))
    sigma = np.empty((horizon, n_u, n_u))

    vx = terminal_expansion.cx.copy()
    vxx = terminal_expansion.cxx.copy()
    dv1 = 0.0
    dv2 = 0.0
    eye = np.eye(n_u)

    for t in reversed(range(horizon)):
        a_mat, b_mat = linearizations[t]
        e = expansions[t]
        qx = e.cx + a_mat.T @ vx
        qu = e.cu + b_mat.T @ vx
        qxx = e.cxx + a_mat.T @ vxx @ a_mat
        qux = e.cux + b_mat.T @ vxx @ a_mat
        quu = e.cuu + b_mat.T @ vxx @ b_mat
        quu = 0.5 * (quu + quu.T) + reg * eye
        try:
            chol = cho_factor(quu, lower=True)
        except np.linalg.LinAlgError as err:
            raise NotPositiveDefinite(f"control Hessian at step {t} (reg={reg:g})") from err

        k_t = -cho_solve(chol, qu)
        big_k = -cho_solve(chol, qux)
        sig = cho_solve(chol, eye)

        gains[t] = big_k
        feedforward[t] = k_t
        sigma[t] = 0.5 * (sig + sig.T)

        vx = qx + big_k.T @ quu @ k_t + big_k.T @ qu + qux.T @ k_t
        vxx = qxx + big_k.T @ quu @ big_k + big_k.T @ qux + qux.T @ big_k
        vxx = 0.5 * (vxx + vxx.T)
        dv1 += float(k_t @ qu)
        dv2 += 0.5 * float(k_t @ quu @ k_t)

    return BackwardPassResult(gains, feedforward, sigma, dv1, dv2)


def forward_pass(nominal_states: Array, nominal_controls: Array, gains: Array,
                 feedforward: Array, step_scale: float, x0: Array, dynamics, cost,
                 bounds: ControlBounds | None = None):
    """Roll the scaled control law through the nonlinear dynamics.

    u_t = u_nom_t + step_scale*k_t + K_t (x_t - x_nom_t), clamped to the
    control bounds.  Returns the new trajectory and its total cost.
    """
    if not 0.0 <= step_scale <= 1.0:
        raise ValueError("step_scale must lie in [0, 1]")
    horizon = nominal_controls.shape[0]
    states = np.empty_like(nominal_states)
    controls = np.empty_like(nominal_controls)
    x = np.asarray(x0, dtype=float)
    states[0] = x
    total = 0.0
    for t in range(horizon):
        u = nominal_controls[t] + step_scale * feedforward[t] + gains[t] @ (x - nominal_states[t])
        if bounds is not None:
            u = bounds.clip(u)
        controls[t] = u
        total += cost.stage(x, u, t)
        x = dynamics.step(x, u)
        states[t + 1] = x
    total += cost.terminal(x)
    return states, controls, total


def nominal_seed(x0, horizon: int, mode: str, bounds: ControlBounds, n_u: int = 3,
                 seed: int | None = None, provided: Array | None = None) -> Array:
    """Initial nominal control sequence: constant mid-range speeds, bounded
    uniform random draws, or a user-provided sequence."""
    lo, hi = bounds.lower(n_u), bounds.upper(n_u)
    if mode == "constant_speed":
        return np.tile((lo + hi) / 2.0, (horizon, 1))
    if mode == "randomized":
        rng = np.random.default_rng(seed)
        return rng.uniform(lo, hi, size=(horizon, n_u))
    if mode == "provided":
        provided = np.asarray(provided, dtype=float)
        if provided.shape != (horizon, n_u):
            raise ValueError(f"provided controls must have shape ({horizon}, {n_u})")
        return provided.copy()
    raise ValueError(f"unknown seed mode {mode!r}")


def _linearize_and_quadratize(states, controls, dynamics, cost):
    horizon = controls.shape[0]
    linearizations = [dynamics.linearize(states[t], controls[t]) for t in range(horizon)]
    expansions = [cost.quadratize_stage(states[t], controls[t], t) for t in range(horizon)]
    return linearizations, expansions, cost.quadratize_terminal(states[-1])


def _open_loop_rollout(x0, controls, dynamics, cost, bounds):
    horizon = controls.shape[0]
    states = np.empty((horizon + 1, np.size(x0)))
    states[0] = x0
    total = 0.0
    for t in range(horizon):
        u = controls[t] if bounds is None else bounds.clip(controls[t])
        controls[t] = u
        total += cost.stage(states[t], u, t)
        states[t + 1] = dynamics.step(states[t], u)
    return states, total


def solve(x0, cost, horizon: int, dynamics, config: ILqrConfig,
          warm_start: LinearGaussianController | None = None,
          seed_mode: str = "constant_speed", seed: int | None = None,
          seed_controls: Array | None = None) -> LinearGaussianController:
    """Iterate quadratize / backward pass / line-searched forward pass until
    the cost improvement falls below cost_tol or max_iters is reached.

    Accepted iterations never increase the cost.  Raises Diverged when no
    cost-decreasing step exists even at maximum regularization.
    """
    x0 = x0.as_vector() if hasattr(x0, "as_vector") else np.asarray(x0, dtype=float)
    bounds = config.control_bounds

    if warm_start is not None:
        if warm_start.horizon != horizon:
            raise ValueError("warm start horizon does not match")
        states, controls, total = forward_pass(
            warm_start.nominal_states, warm_start.nominal_controls, warm_start.gains,
            warm_start.feedforward, 1.0, x0, dynamics, cost, bounds)
    else:
        controls = nominal_seed(x0, horizon, seed_mode, bounds or ControlBounds(),
                                dynamics.n_u, seed, seed_controls)
        states, total = _open_loop_rollout(x0, controls, dynamics, cost, bounds)

    reg = config.reg_init
    scales = [0.5 ** i for i in range(config.line_search_backtracks + 1)]

    for _ in range(config.max_iters):
        linz, expans, term = _linearize_and_quadratize(states, controls, dynamics, cost)
        while True:
            try:
                bp = backward_pass(states, controls, linz, expans, term, reg)
                break
            except NotPositiveDefinite:
                reg = config.reg_min if reg == 0.0 else reg * 10.0
                if reg > config.reg_max:
                    raise Diverged("control Hessian not repairable at maximum regularization")

        if abs(bp.expected_decrease(1.0)) < config.cost_tol:
            break

        accepted = False
        for scale in scales:
            try:
                new_states, new_controls, new_total = forward_pass(
                    states, controls, bp.gains, bp.feedforward, scale, x0,
                    dynamics, cost, bounds)
            except Exception:
                continue  # infeasible probe (e.g. clearance); try a shorter step
            if new_total < total:
                improvement = total - new_total
                states, controls, total = new_states, new_controls, new_total
                reg = max(reg * 0.5, config.reg_min) if reg > 0.0 else 0.0
                accepted = True
                break

        if not accepted:
            reg = config.reg_min if reg == 0.0 else reg * 10.0
            if reg > config.reg_max:
                raise Diverged("no cost-decreasing step at maximum regularization")
            continue

        if improvement < config.cost_tol:
            break

    linz, expans, term = _linearize_and_quadratize(states, controls, dynamics, cost)
    while True:
        try:
            bp = backward_pass(states, controls, linz, expans, term, reg)
            break
        except NotPositiveDefinite:
            reg = config.reg_min if reg == 0.0 else reg * 10.0
            if reg > config.reg_max:
                raise Diverged("control Hessian not repairable at maximum regularization")

    return LinearGaussianController(bp.gains, bp.feedforward, bp.sigma,
                                    states.copy(), controls.copy())


def controller_cost(controller: LinearGaussianController, cost) -> float:
    """Total cost of the controller's nominal trajectory."""
    return trajectory_cost(cost, controller.nominal_states, controller.nominal_controls)
