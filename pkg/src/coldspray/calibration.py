"""Fit spray parameters to multi-pass constant-speed deposition data.

Each recorded pass is predicted from its measured predecessor (teacher
forcing), and the summed squared profile residuals are minimized by a
bounded quasi-Newton solver with central-difference gradients, restarted
from Latin-hypercube points spread over the (log-scaled) parameter box.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import AllStartsFailed, DimensionMismatch
from .model import GridSpec, ModelParams, step_states

Array = np.ndarray

PARAM_NAMES = ("rho", "a", "b", "c", "kappa")

DEFAULT_LOWER = ModelParams(rho=0.01, a=0.1, b=0.01, c=0.1, kappa=0.5)
DEFAULT_UPPER = ModelParams(rho=100.0, a=50.0, b=10.0, c=100.0, kappa=8.0)


@dataclass(frozen=True)
class ParamBounds:
    lower: ModelParams = DEFAULT_LOWER
    upper: ModelParams = DEFAULT_UPPER

    def __post_init__(self):
        lo, hi = self.lower.as_array(), self.upper.as_array()
        if np.any(lo >= hi):
            raise ValueError("lower bounds must be strictly below upper bounds")
        if np.any(lo <= 0.0):
            raise ValueError("lower bounds must be strictly positive")

    def as_arrays(self):
        return self.lower.as_array(), self.upper.as_array()


@dataclass(eq=False)
class PassRecord:
    speed: float
    before: Array
    after: Array


@dataclass(eq=False)
class CalibrationDataset:
    passes: list
    grid: GridSpec
    nozzle_height: float
    train_indices: list = field(default_factory=list)
    val_indices: list = field(default_factory=list)

    def __post_init__(self):
        n = self.grid.n_cells
        for idx, rec in enumerate(self.passes):
            if rec.speed <= 0.0:
                raise ValueError(f"pass {idx}: speed must be positive")
            if len(rec.before) != n or len(rec.after) != n:
                raise DimensionMismatch(f"pass {idx}: profiles must have {n} cells")
        if not self.train_indices:
            self.train_indices = list(range(max(1, len(self.passes) - 1)))
        if not self.val_indices:
            self.val_indices = [i for i in range(len(self.passes)) if i not in self.train_indices]


@dataclass(frozen=True)
class FitConfig:
    n_starts: int = 6
    maxiter: int = 80
    seed: int = 0
    fd_step: float = 1e-6
    include_init_start: bool = True


@dataclass(eq=False)
class FitReport:
    params: ModelParams
    objective_value: float
    train_rmse: dict
    validation_rmse: dict
    predictions: list
    n_starts_succeeded: int

    def to_dict(self) -> dict:
        return {
            "params": dict(zip(PARAM_NAMES, self.params.as_array().tolist())),
            "objective_value": self.objective_value,
            "train_rmse": {str(k): v for k, v in self.train_rmse.items()},
            "validation_rmse": {str(k): v for k, v in self.validation_rmse.items()},
            "n_starts_succeeded": self.n_starts_succeeded,
        }


def pass_steps(grid: GridSpec, speed: float) -> int:
    """Steps needed to traverse the domain end to end at constant speed."""
    return max(1, math.ceil((grid.x_end - grid.x0) / (speed * grid.dt) - 1e-12))


def simulate_pass(before, speed: float, nozzle_height: float, grid: GridSpec,
                  params: ModelParams) -> Array:
    """Predicted profile after one full constant-speed traverse."""
    return _simulate_pass_multi(before, speed, nozzle_height, grid,
                                params.as_array()[None, :])[0]


def _simulate_pass_multi(before, speed: float, nozzle_height: float, grid: GridSpec,
                         param_rows: Array) -> Array:
    """Simulate the same pass under several parameter vectors at once.

    param_rows has shape (P, 5); returns the (P, n_cells) predicted profiles.
    Batching the parameter axis makes finite-difference gradients of the
    calibration objective cheap.
    """
    if speed <= 0.0:
        raise ValueError("speed must be positive")
    p_count = param_rows.shape[0]
    n = grid.n_cells
    cols = [np.asarray(param_rows[:, j], dtype=float)[:, None] for j in range(5)]
    view = SimpleNamespace(**dict(zip(PARAM_NAMES, cols)))

    x = np.empty((p_count, n + 3))
    x[:, :n] = np.asarray(before, dtype=float)
    x[:, n] = grid.x0
    x[:, n + 1] = nozzle_height
    x[:, n + 2] = 0.0
    eps_h = 0.1 * (nozzle_height - float(np.max(before)))
    u = np.array([speed, 0.0, 0.0])
    for _ in range(pass_steps(grid, speed)):
        x = step_states(x, u, grid, view, eps_h)
    return x[:, :n]


def objective(params, dataset: CalibrationDataset, subset=None) -> float:
    """Sum of squared residual norms over the chosen passes, each predicted
    from its measured predecessor."""
    row = params.as_array() if isinstance(params, ModelParams) else np.asarray(params, dtype=float)
    return float(_objective_multi(row[None, :], dataset, subset)[0])


def _objective_multi(param_rows: Array, dataset: CalibrationDataset, subset=None) -> Array:
    if subset is None:
        subset = range(len(dataset.passes))
    subset = list(subset)
    if not subset:
        raise ValueError("subset must be nonempty")
    total = np.zeros(param_rows.shape[0])
    for idx in subset:
        rec = dataset.passes[idx]
        pred = _simulate_pass_multi(rec.before, rec.speed, dataset.nozzle_height,
                                    dataset.grid, param_rows)
        total += ((pred - rec.after) ** 2).sum(axis=1)
    return total


def _central_gradient(p: Array, dataset, subset, bounds: ParamBounds, fd_step: float) -> Array:
    lo, hi = bounds.as_arrays()
    h = fd_step * (1.0 + np.abs(p))
    # keep probes inside the box so the model stays valid
    h = np.minimum(h, 0.45 * (hi - lo))
    plus = np.clip(p + np.diag(h), lo, hi)
    minus = np.clip(p - np.diag(h), lo, hi)
    vals = _objective_multi(np.concatenate([plus, minus]), dataset, subset)
    denom = plus[np.arange(5), np.arange(5)] - minus[np.arange(5), np.arange(5)]
    return (vals[:5] - vals[5:]) / denom


def _latin_hypercube_starts(bounds: ParamBounds, count: int, seed: int) -> Array:
    """Starts spread over the box in log space, since every parameter is
    positive and the default bounds span decades."""
    lo, hi = (np.log(v) for v in bounds.as_arrays())
    sampler = qmc.LatinHypercube(d=5, seed=seed)
    return np.exp(lo + sampler.random(count) * (hi - lo))


def fit(dataset: CalibrationDataset, bounds: ParamBounds | None = None,
        init: ModelParams | None = None, config: FitConfig | None = None):
    """Multi-start bounded minimization of the calibration objective.

    Returns the best parameters plus a report with per-pass train/validation
    RMSE and the predicted profiles under the fitted parameters.
    """
    bounds = bounds or ParamBounds()
    config = config or FitConfig()
    lo, hi = bounds.as_arrays()
    train = dataset.train_indices

    starts = list(_latin_hypercube_starts(bounds, config.n_starts, config.seed))
    if init is not None:
        p0 = np.clip(init.as_array(), lo, hi)
        if config.include_init_start:
            starts.insert(0, p0)

    best = None
    succeeded = 0
    for start in starts:
        try:
            res = minimize(
                lambda p: objective(p, dataset, train),
                start,
                jac=lambda p: _central_gradient(p, dataset, train, bounds, config.fd_step),
                method="L-BFGS-B",
                bounds=list(zip(lo, hi)),
                options={"maxiter": config.maxiter},
            )
        except (FloatingPointError, ValueError):
            continue
        if not np.isfinite(res.fun):
            continue
        succeeded += 1
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise AllStartsFailed("no optimizer start produced a finite objective")

    params = ModelParams.from_array(np.clip(best.x, lo, hi))
    predictions = [
        simulate_pass(rec.before, rec.speed, dataset.nozzle_height, dataset.grid, params)
        for rec in dataset.passes
    ]
    train_rmse = {i: _rmse(predictions[i], dataset.passes[i].after) for i in train}
    val_rmse = {i: _rmse(predictions[i], dataset.passes[i].after)
                for i in dataset.val_indices}
    report = FitReport(params, float(best.fun), train_rmse, val_rmse,
                       predictions, succeeded)
    return params, report


def _rmse(a: Array, b: Array) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def make_synthetic_dataset(grid: GridSpec, params: ModelParams, nozzle_height: float,
                           speeds, initial, noise_std: float = 0.0,
                           seed: int | None = None,
                           train_indices=None, val_indices=None) -> CalibrationDataset:
    """Consecutive constant-speed passes simulated from known parameters,
    optionally corrupted by measurement noise; the standard round-trip input
    for checking identifiability."""
    rng = np.random.default_rng(seed)
    surface = np.asarray(initial, dtype=float).copy()
    passes = []
    for speed in speeds:
        after = simulate_pass(surface, speed, nozzle_height, grid, params)
        before_meas = surface.copy()
        after_meas = after.copy()
        if noise_std > 0.0:
            before_meas = before_meas + rng.normal(size=surface.size) * noise_std
            after_meas = after_meas + rng.normal(size=surface.size) * noise_std
        passes.append(PassRecord(float(speed), before_meas, after_meas))
        surface = after
    return CalibrationDataset(passes, grid, nozzle_height,
                              list(train_indices or []), list(val_indices or []))


# ---------------------------------------------------------------------------
# Dataset files: one CSV per pass plus a JSON manifest


def save_dataset(directory, dataset: CalibrationDataset) -> None:
    import pathlib

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "grid": {"x0": dataset.grid.x0, "dx": dataset.grid.dx,
                 "n_cells": dataset.grid.n_cells, "dt": dataset.grid.dt},
        "nozzle_height": dataset.nozzle_height,
        "speeds": [rec.speed for rec in dataset.passes],
        "train_indices": list(dataset.train_indices),
        "val_indices": list(dataset.val_indices),
        "pass_files": [f"pass_{i:02d}.csv" for i in range(len(dataset.passes))],
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    xs = dataset.grid.cell_centers
    for i, rec in enumerate(dataset.passes):
        with open(directory / manifest["pass_files"][i], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x_mm", "before_mm", "after_mm"])
            for x, b, a in zip(xs, rec.before, rec.after):
                writer.writerow([repr(float(x)), repr(float(b)), repr(float(a))])


def load_dataset(directory) -> CalibrationDataset:
    import pathlib

    directory = pathlib.Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    grid = GridSpec(**manifest["grid"])
    passes = []
    for speed, name in zip(manifest["speeds"], manifest["pass_files"]):
        before, after = [], []
        with open(directory / name, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                before.append(float(row[1]))
                after.append(float(row[2]))
        passes.append(PassRecord(float(speed), np.array(before), np.array(after)))
    return CalibrationDataset(passes, grid, manifest["nozzle_height"],
                              manifest.get("train_indices", []),
                              manifest.get("val_indices", []))
