"""Small feedforward policy mapping (surface heights, nozzle position) to a
bounded mean control, trained by supervised regression onto guiding
controllers.

The net is one tanh hidden layer with a sigmoid output rescaled into the
control range, so its output can never leave the actuator bounds.  All
gradients are hand-written backprop; training is plain minibatch gradient
descent with momentum, fully determined by a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    DimensionMismatch,
    NonFiniteLoss,
    SingularCovariance,
    SingularPrecision,
)

Array = np.ndarray

CHECKPOINT_SCHEMA = "coldspray-policy-v1"


@dataclass(eq=False)
class MlpWeights:
    """Layer weights plus the output range and input normalization constants.

    Heights are divided by height_scale and the nozzle position by
    position_scale before entering the net, so the scales must travel with
    the weights.
    """

    w1: Array  # (n_hidden, n_in)
    b1: Array  # (n_hidden,)
    w2: Array  # (n_out, n_hidden)
    b2: Array  # (n_out,)
    u_min: float
    u_max: float
    height_scale: float = 1.0
    position_scale: float = 1.0

    @property
    def n_in(self) -> int:
        return self.w1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_out(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "MlpWeights":
        return MlpWeights(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                          self.u_min, self.u_max, self.height_scale, self.position_scale)


@dataclass(eq=False)
class PolicyParams:
    """Network weights plus the state-independent control covariance."""

    weights: MlpWeights
    sigma: Array  # (n_out, n_out)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    u_min: float = 0.0
    u_max: float = 5.0
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.u_min >= self.u_max:
            raise ValueError("u_min must be below u_max")


@dataclass(eq=False)
class TrainingBatch:
    """Supervision tuples: input features, target mean controls, target
    precisions, per-sample step weights and multipliers."""

    features: Array    # (S, n_in)
    targets: Array     # (S, n_out)
    precisions: Array  # (S, n_out, n_out)
    nus: Array         # (S,)
    lams: Array        # (S, n_out)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "TrainingBatch":
        return TrainingBatch(self.features[idx], self.targets[idx],
                             self.precisions[idx], self.nus[idx], self.lams[idx])


def init_weights(n_in: int, n_hidden: int, n_out: int, u_min: float, u_max: float,
                 seed: int = 0, height_scale: float = 1.0,
                 position_scale: float = 1.0) -> MlpWeights:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, from the run seed."""
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / np.sqrt(n_in)
    lim2 = 1.0 / np.sqrt(n_hidden)
    return MlpWeights(
        w1=rng.uniform(-lim1, lim1, size=(n_hidden, n_in)),
        b1=np.zeros(n_hidden),
        w2=rng.uniform(-lim2, lim2, size=(n_out, n_hidden)),
        b2=np.zeros(n_out),
        u_min=u_min,
        u_max=u_max,
        height_scale=height_scale,
        position_scale=position_scale,
    )


def features(weights: MlpWeights, surface, position) -> Array:
    """Normalized input vector: scaled heights followed by scaled position."""
    surface = np.asarray(surface, dtype=float)
    return np.concatenate([surface / weights.height_scale,
                           [float(position) / weights.position_scale]])


def _forward_cached(weights: MlpWeights, feats: Array):
    z1 = feats @ weights.w1.T + weights.b1
    a1 = np.tanh(z1)
    z2 = a1 @ weights.w2.T + weights.b2
    s = expit(z2)
    mu = weights.u_min + (weights.u_max - weights.u_min) * s
    return a1, s, mu


def forward(weights: MlpWeights, feats) -> Array:
    """Mean control for one feature vector or a batch of them; values lie
    strictly inside (u_min, u_max)."""
    feats = np.asarray(feats, dtype=float)
    if feats.shape[-1] != weights.n_in:
        raise DimensionMismatch(
            f"expected {weights.n_in} inputs, got {feats.shape[-1]}"
        )
    return _forward_cached(weights, feats)[2]


def state_mean(weights: MlpWeights, surface, position) -> Array:
    return forward(weights, features(weights, surface, position))


def input_jacobian(weights: MlpWeights, surface, position,
                   fd_step: float = 1e-6) -> Array:
    """d(mean)/d(surface, position) by central differences over the network
    input, shape (n_out, n_cells+1), in raw (unnormalized) units."""
    f0 = features(weights, surface, position)
    h = fd_step * (1.0 + np.abs(f0))
    probes = np.concatenate([f0 + np.diag(h), f0 - np.diag(h)])
    vals = forward(weights, probes)
    n = f0.size
    jac = ((vals[:n] - vals[n:]) / (2.0 * h[:, None])).T  # (n_out, n_in)
    jac = jac.copy()
    jac[:, :-1] /= weights.height_scale
    jac[:, -1] /= weights.position_scale
    return jac


def loss_and_grad(weights: MlpWeights, batch: TrainingBatch):
    """Supervised objective and its gradient.

    loss = (1/2S) * sum_s [nu_s (mu_q - mu)' P_s (mu_q - mu) + 2 lam_s' mu]
    over the S samples in the batch, with P_s the target precision.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    if not np.all(np.isfinite(batch.precisions)):
        raise SingularPrecision("non-finite precision matrices in batch")

    feats = batch.features
    a1, s, mu = _forward_cached(weights, feats)
    r = mu - batch.targets                                   # (S, n_out)
    pr = np.einsum("sij,sj->si", batch.precisions, r)        # (S, n_out)
    n_batch = len(batch)
    loss = float(
        (np.einsum("si,si->s", r, pr) * batch.nus).sum() + 2.0 * (batch.lams * mu).sum()
    ) / (2.0 * n_batch)

    dmu = (batch.nus[:, None] * pr + batch.lams) / n_batch   # (S, n_out)
    span = weights.u_max - weights.u_min
    dz2 = dmu * span * s * (1.0 - s)
    grads = {
        "w2": dz2.T @ a1,
        "b2": dz2.sum(axis=0),
    }
    da1 = dz2 @ weights.w2
    dz1 = da1 * (1.0 - a1 * a1)
    grads["w1"] = dz1.T @ feats
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


def train(weights: MlpWeights, dataset: TrainingBatch, config: TrainConfig) -> MlpWeights:
    """Minibatch gradient descent with momentum; deterministic from the seed.

    The returned weights are the epoch snapshot with the lowest full-dataset
    loss, so the result is never worse than the starting point.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    w = weights.copy()
    if config.epochs == 0:
        return w

    rng = np.random.default_rng(config.seed)
    vel = {k: np.zeros_like(getattr(w, k)) for k in ("w1", "b1", "w2", "b2")}
    best_loss = loss_and_grad(w, dataset)[0]
    best = w.copy()
    size = len(dataset)
    n_batch = min(config.batch_size, size)

    for _ in range(config.epochs):
        order = rng.permutation(size)
        for lo in range(0, size, n_batch):
            sub = dataset.subset(order[lo:lo + n_batch])
            loss, grads = loss_and_grad(w, sub)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss}")
            for key, g in grads.items():
                vel[key] = config.momentum * vel[key] - config.learning_rate * g
                getattr(w, key)[...] += vel[key]
        full = loss_and_grad(w, dataset)[0]
        if full < best_loss:
            best_loss = full
            best = w.copy()
    return best


def policy_covariance(guides) -> Array:
    """State-independent policy covariance: the inverse of the mean guide
    precision over all guides and steps."""
    precisions = []
    for guide in guides:
        for t in range(guide.horizon):
            sig = guide.sigma[t]
            try:
                precisions.append(np.linalg.inv(sig))
            except np.linalg.LinAlgError as err:
                raise SingularPrecision(f"guide covariance at step {t} is singular") from err
    mean_precision = np.mean(precisions, axis=0)
    try:
        out = np.linalg.inv(mean_precision)
    except np.linalg.LinAlgError as err:
        raise SingularPrecision("mean precision is singular") from err
    return 0.5 * (out + out.T)


def gaussian_chol(sigma: Array) -> Array:
    """Cholesky factor of a covariance, raising SingularCovariance on failure."""
    try:
        return np.linalg.cholesky(np.asarray(sigma, dtype=float))
    except np.linalg.LinAlgError as err:
        raise SingularCovariance("covariance is not positive definite") from err


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, policy: PolicyParams) -> None:
    w = policy.weights
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "layer_sizes": [w.n_in, w.n_hidden, w.n_out],
        "u_min": w.u_min,
        "u_max": w.u_max,
        "height_scale": w.height_scale,
        "position_scale": w.position_scale,
        "w1": w.w1.ravel().tolist(),
        "b1": w.b1.tolist(),
        "w2": w.w2.ravel().tolist(),
        "b2": w.b2.tolist(),
        "sigma": np.asarray(policy.sigma).ravel().tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> PolicyParams:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema')!r}")
    n_in, n_hidden, n_out = payload["layer_sizes"]
    weights = MlpWeights(
        w1=np.array(payload["w1"]).reshape(n_hidden, n_in),
        b1=np.array(payload["b1"]),
        w2=np.array(payload["w2"]).reshape(n_out, n_hidden),
        b2=np.array(payload["b2"]),
        u_min=payload["u_min"],
        u_max=payload["u_max"],
        height_scale=payload["height_scale"],
        position_scale=payload["position_scale"],
    )
    sigma = np.array(payload["sigma"]).reshape(n_out, n_out)
    return PolicyParams(weights, sigma)
