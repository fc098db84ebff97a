"""Cost functions for trajectory optimization and their local quadratic
models.

Three layers: a running penalty on nozzle speeds, a per-pass objective that
adds the squared distance of the surface from the pass goal at every step,
and an augmented variant that folds in the dual variables and the negative
log-density of the current policy for constrained distillation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import policy as policy_net
from .errors import DimensionMismatch, SingularCovariance
from .model import SimState

Array = np.ndarray

CUU_EIG_FLOOR = 1e-6


@dataclass(frozen=True)
class CostWeights:
    """Running-cost weights: constant time penalty w0, quadratic speed
    penalties w1..w3, and the weight on squared profile error."""

    w0: float = 0.0
    w1: float = 0.0
    w2: float = 0.0
    w3: float = 0.0
    w_goal: float = 1.0

    def __post_init__(self):
        if min(self.w0, self.w1, self.w2, self.w3) < 0.0:
            raise ValueError("weights must be nonnegative")
        if self.w_goal <= 0.0:
            raise ValueError("w_goal must be positive")

    def control_weights(self, n_u: int = 3) -> Array:
        return np.array([self.w1, self.w2, self.w3])[:n_u]


@dataclass(eq=False)
class QuadraticExpansion:
    """Second-order model c0 + cx'dx + cu'du + 1/2 dx'cxx dx + 1/2 du'cuu du
    + du'cux dx around the expansion point."""

    c0: float
    cx: Array
    cu: Array
    cxx: Array
    cuu: Array
    cux: Array


def _surface_part(state, n_cells: int) -> Array:
    """Accept a SimState, a full state vector or a bare surface profile."""
    if isinstance(state, SimState):
        d = state.surface
    else:
        d = np.asarray(state, dtype=float)
        if d.size == n_cells + 3:
            d = d[:n_cells]
    if d.size != n_cells:
        raise DimensionMismatch(f"surface has {d.size} cells, expected {n_cells}")
    return d


def floor_spd(mat: Array, floor: float = CUU_EIG_FLOOR) -> Array:
    """Symmetrize and floor the eigenvalues so the matrix is safely positive
    definite."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() >= floor:
        return sym
    return (vecs * np.maximum(vals, floor)) @ vecs.T


# ---------------------------------------------------------------------------
# Spec-level cost evaluations


def running_cost(state, u, w: CostWeights) -> float:
    """w0 plus quadratic penalties on the control components."""
    u = np.asarray(u, dtype=float)
    wu = w.control_weights(u.size)
    return float(w.w0 + wu @ (u * u))


def terminal_cost(state, goal, w_goal: float) -> float:
    """Squared Euclidean distance of the surface from the goal, weighted."""
    goal = np.asarray(goal, dtype=float)
    d = _surface_part(state, goal.size)
    err = d - goal
    return float(w_goal * (err @ err))


def per_pass_cost(state, u, goal, w: CostWeights) -> float:
    """Running cost plus the goal-error term, applied at every step."""
    return running_cost(state, u, w) + terminal_cost(state, goal, w.w_goal)


def augmented_cost(state, u, t: int, goal, w: CostWeights, lambda_t, nu_t: float,
                   policy: policy_net.PolicyParams) -> float:
    """Per-pass cost rescaled by 1/nu_t, minus the multiplier reward on the
    control, plus the negative log-density of the policy at the state."""
    if nu_t <= 0.0:
        raise ValueError("nu_t must be positive")
    u = np.asarray(u, dtype=float)
    lambda_t = np.asarray(lambda_t, dtype=float)
    base = per_pass_cost(state, u, goal, w) / nu_t - float(u @ lambda_t) / nu_t
    goal = np.asarray(goal, dtype=float)
    d = _surface_part(state, goal.size)
    position = state.nozzle.position if isinstance(state, SimState) else \
        float(np.asarray(state, dtype=float)[goal.size])
    mu = policy_net.state_mean(policy.weights, d, position)
    return base + _gaussian_nll(u, mu, policy.sigma)


def _gaussian_nll(u: Array, mu: Array, sigma: Array) -> float:
    chol = policy_net.gaussian_chol(sigma)
    r = np.linalg.solve(chol, u - mu)
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return 0.5 * float(r @ r) + 0.5 * (u.size * np.log(2.0 * np.pi) + logdet)


# ---------------------------------------------------------------------------
# Trajectory-cost objects consumed by the optimizer


class PerPassCost:
    """Stage cost running + w_goal*||d - goal||^2 at every step, with the
    same goal term as terminal cost."""

    def __init__(self, goal, weights: CostWeights, n_controls: int = 3):
        self.goal = np.asarray(goal, dtype=float)
        self.weights = weights
        self.n_u = n_controls

    @property
    def n_cells(self) -> int:
        return self.goal.size

    def stage(self, x, u, t: int = 0) -> float:
        return per_pass_cost(x, u, self.goal, self.weights)

    def terminal(self, x) -> float:
        return terminal_cost(x, self.goal, self.weights.w_goal)

    def quadratize_stage(self, x, u, t: int = 0) -> QuadraticExpansion:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        n, nd = x.size, self.n_cells
        w = self.weights
        wu = w.control_weights(self.n_u)

        cx = np.zeros(n)
        cxx = np.zeros((n, n))
        err = x[:nd] - self.goal
        cx[:nd] = 2.0 * w.w_goal * err
        cxx[:nd, :nd] = 2.0 * w.w_goal * np.eye(nd)

        cu = 2.0 * wu * u
        cuu = floor_spd(np.diag(2.0 * wu))
        cux = np.zeros((self.n_u, n))
        return QuadraticExpansion(self.stage(x, u, t), cx, cu, cxx, cuu, cux)

    def quadratize_terminal(self, x) -> QuadraticExpansion:
        x = np.asarray(x, dtype=float)
        n, nd = x.size, self.n_cells
        cx = np.zeros(n)
        cxx = np.zeros((n, n))
        err = x[:nd] - self.goal
        cx[:nd] = 2.0 * self.weights.w_goal * err
        cxx[:nd, :nd] = 2.0 * self.weights.w_goal * np.eye(nd)
        return QuadraticExpansion(self.terminal(x), cx, np.zeros(self.n_u), cxx,
                                  np.zeros((self.n_u, self.n_u)), np.zeros((self.n_u, n)))


class AugmentedCost:
    """Per-pass cost divided by the step weights nu_t, minus the multiplier
    term, plus -log pi(u|x) for the current policy.

    The policy enters the quadratic model through its input Jacobian
    (Gauss-Newton: the network curvature term is dropped), which keeps the
    expansion positive semidefinite.
    """

    def __init__(self, per_pass: PerPassCost, lambdas, nus,
                 policy: policy_net.PolicyParams):
        self.per_pass = per_pass
        self.lambdas = np.asarray(lambdas, dtype=float)   # (T, n_u)
        self.nus = np.asarray(nus, dtype=float)           # (T,)
        self.policy = policy
        if np.any(self.nus <= 0.0):
            raise ValueError("all nu_t must be positive")
        try:
            self._chol = np.linalg.cholesky(np.asarray(policy.sigma, dtype=float))
        except np.linalg.LinAlgError as err:
            raise SingularCovariance("policy covariance is not positive definite") from err
        self._prec = np.linalg.inv(policy.sigma)
        self._logdet = 2.0 * float(np.log(np.diag(self._chol)).sum())

    @property
    def n_u(self) -> int:
        return self.per_pass.n_u

    def _policy_mean(self, x: Array) -> Array:
        nd = self.per_pass.n_cells
        return policy_net.state_mean(self.policy.weights, x[:nd], x[nd])

    def stage(self, x, u, t: int) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        nu = self.nus[t]
        base = (self.per_pass.stage(x, u, t) - float(u @ self.lambdas[t])) / nu
        mu = self._policy_mean(x)
        r = np.linalg.solve(self._chol, u - mu)
        return base + 0.5 * float(r @ r) + 0.5 * (
            u.size * np.log(2.0 * np.pi) + self._logdet
        )

    def terminal(self, x) -> float:
        return self.per_pass.terminal(x) / self.nus[-1]

    def quadratize_stage(self, x, u, t: int) -> QuadraticExpansion:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        nu = self.nus[t]
        base = self.per_pass.quadratize_stage(x, u, t)

        nd = self.per_pass.n_cells
        mu = self._policy_mean(x)
        jac_in = policy_net.input_jacobian(self.policy.weights, x[:nd], x[nd])
        jac = np.zeros((self.n_u, x.size))
        jac[:, :nd] = jac_in[:, :-1]
        jac[:, nd] = jac_in[:, -1]

        r = u - mu
        pr = self._prec @ r
        cx = base.cx / nu - jac.T @ pr
        cu = base.cu / nu - self.lambdas[t] / nu + pr
        cxx = base.cxx / nu + jac.T @ self._prec @ jac
        cux = base.cux / nu - self._prec @ jac
        cuu = floor_spd(base.cuu / nu + self._prec)
        return QuadraticExpansion(self.stage(x, u, t), cx, cu, cxx, cuu, cux)

    def quadratize_terminal(self, x) -> QuadraticExpansion:
        base = self.per_pass.quadratize_terminal(x)
        nu = self.nus[-1]
        return QuadraticExpansion(base.c0 / nu, base.cx / nu, base.cu / nu,
                                  base.cxx / nu, base.cuu / nu, base.cux / nu)


class QuadraticCost:
    """Plain quadratic objective x'Qx + u'Ru with terminal x'Qf x, optionally
    measured from a reference state.  Used for solver verification against
    closed-form recursions."""

    def __init__(self, q: Array, r: Array, qf: Array, x_ref=None):
        self.q = np.asarray(q, dtype=float)
        self.r = np.asarray(r, dtype=float)
        self.qf = np.asarray(qf, dtype=float)
        self.x_ref = np.zeros(self.q.shape[0]) if x_ref is None else np.asarray(x_ref, dtype=float)
        self.n_u = self.r.shape[0]

    def stage(self, x, u, t: int = 0) -> float:
        dx = np.asarray(x, dtype=float) - self.x_ref
        u = np.asarray(u, dtype=float)
        return float(dx @ self.q @ dx + u @ self.r @ u)

    def terminal(self, x) -> float:
        dx = np.asarray(x, dtype=float) - self.x_ref
        return float(dx @ self.qf @ dx)

    def quadratize_stage(self, x, u, t: int = 0) -> QuadraticExpansion:
        dx = np.asarray(x, dtype=float) - self.x_ref
        u = np.asarray(u, dtype=float)
        return QuadraticExpansion(
            self.stage(x, u, t),
            2.0 * self.q @ dx,
            2.0 * self.r @ u,
            2.0 * self.q,
            2.0 * self.r,
            np.zeros((self.n_u, dx.size)),
        )

    def quadratize_terminal(self, x) -> QuadraticExpansion:
        dx = np.asarray(x, dtype=float) - self.x_ref
        return QuadraticExpansion(self.terminal(x), 2.0 * self.qf @ dx,
                                  np.zeros(self.n_u), 2.0 * self.qf,
                                  np.zeros((self.n_u, self.n_u)),
                                  np.zeros((self.n_u, dx.size)))


def quadratize(cost, state, u, t: int = 0) -> QuadraticExpansion:
    """Local quadratic model of a stage cost around (state, u)."""
    x = state.as_vector() if isinstance(state, SimState) else np.asarray(state, dtype=float)
    return cost.quadratize_stage(x, np.asarray(u, dtype=float), t)


def trajectory_cost(cost, states: Array, controls: Array) -> float:
    """Total cost of a state/control trajectory: staged terms plus terminal."""
    total = 0.0
    for t in range(controls.shape[0]):
        total += cost.stage(states[t], controls[t], t)
    return total + cost.terminal(states[-1])
