"""JSON scenario configuration: defaults, loading and typed builders.

A single config file describes the grid, spray parameters, coupon, costs,
bounds, noise, training and run settings.  User files override the defaults
key by key (nested keys merge recursively), so a config only needs the
fields it changes.  All keys are snake_case; units are mm, s and rad.
"""

from __future__ import annotations

import copy
import json

import numpy as np

from . import gps, harness, ilqr, policy as policy_net
from .calibration import FitConfig, ParamBounds
from .costs import CostWeights
from .model import ControlBounds, CouponSpec, DepositionModel, GridSpec, ModelParams, NoiseSpec

DEFAULT_CONFIG = {
    "grid": {"x0": 0.0, "dx": 1.0, "n_cells": 20, "dt": 0.35},
    "params_true": {"rho": 0.3, "a": 2.0, "b": 0.5, "c": 2.0, "kappa": 2.5},
    # Either give params_nominal explicitly or enable the relative mismatch,
    # which perturbs the true parameters with alternating signs.
    "params_nominal": None,
    "mismatch": {"enabled": False, "relative": 0.1},
    "coupon": {"depth_mm": 1.0, "top_width_mm": 8.0, "wall_angle_deg": 45.0, "center_mm": None},
    "nozzle": {"height_mm": 8.0, "start_mm": None},
    "cost": {"w0": 0.0, "w1": 0.005, "w2": 0.0, "w3": 0.0, "w_goal": 1.0},
    "bounds": {"vx_min": 0.0, "vx_max": 5.0, "vh_min": 0.0, "vh_max": 0.0,
               "omega_min": 0.0, "omega_max": 0.0},
    "noise": {"control_std": 0.0, "surface_std": 0.0, "measurement_std": 0.01},
    "gps": {
        "guides": 3,
        "samples_per_guide": 5,
        "iterations": 10,
        "steps_per_pass": 30,
        "dual_step": 0.1,
        "nu_init": 0.01,
        "nu_factor_up": 2.0,
        "nu_factor_down": 0.5,
        "nu_min": 1e-4,
        "nu_max": 1e4,
        "kl_band": [0.5, 2.0],
        "hidden": 10,
        "convergence_rtol": 0.01,
        "train": {"learning_rate": 0.05, "epochs": 200, "batch_size": 64, "momentum": 0.9},
        "ilqr": {"max_iters": 40, "cost_tol": 1e-4, "reg_init": 0.0, "reg_min": 1e-9,
                 "reg_max": 1e8, "line_search_backtracks": 10},
    },
    "run": {
        "max_passes": 12,
        "fill_tolerance_mm": 0.1,
        "max_steps_per_pass": 2000,
        "constant_speed": 1.0,
        "varying_profile": {"fast": 5.0, "slow": 1.0, "ramp_cells": 3,
                            "positions": None, "speeds": None},
    },
    "calibration": {
        "speeds": [1.0, 2.0, 3.0, 4.0, 5.0],
        "noise_std_mm": 0.0,
        "n_starts": 6,
        "maxiter": 80,
        "train_passes": [0, 1, 2, 3],
        "val_passes": [4],
        "bounds": {
            "lower": {"rho": 0.01, "a": 0.1, "b": 0.01, "c": 0.1, "kappa": 0.5},
            "upper": {"rho": 100.0, "a": 50.0, "b": 10.0, "c": 100.0, "kappa": 8.0},
        },
        "dataset_dir": None,
    },
}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None) -> dict:
    """Defaults, with the given JSON file merged on top if provided."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})")
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _merge(DEFAULT_CONFIG, user)


# ---------------------------------------------------------------------------
# Typed builders


def build_grid(cfg: dict) -> GridSpec:
    g = cfg["grid"]
    return GridSpec(float(g["x0"]), float(g["dx"]), int(g["n_cells"]), float(g["dt"]))


def build_params(section: dict) -> ModelParams:
    return ModelParams(**{k: float(section[k]) for k in ("rho", "a", "b", "c", "kappa")})


def perturb_params(params: ModelParams, relative: float) -> ModelParams:
    """Deterministic plant/model mismatch: scale the parameters by
    (1 +- relative) with alternating signs."""
    signs = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
    return ModelParams.from_array(params.as_array() * (1.0 + relative * signs))


def build_models(cfg: dict):
    grid = build_grid(cfg)
    true_params = build_params(cfg["params_true"])
    if cfg["params_nominal"] is not None:
        nominal = build_params(cfg["params_nominal"])
    elif cfg["mismatch"]["enabled"]:
        nominal = perturb_params(true_params, float(cfg["mismatch"]["relative"]))
    else:
        nominal = true_params
    return DepositionModel(grid, true_params), DepositionModel(grid, nominal)


def build_coupon(cfg: dict) -> CouponSpec:
    c = cfg["coupon"]
    center = c["center_mm"]
    return CouponSpec(float(c["depth_mm"]), float(c["top_width_mm"]),
                      float(c["wall_angle_deg"]),
                      None if center is None else float(center))


def build_weights(cfg: dict) -> CostWeights:
    return CostWeights(**{k: float(v) for k, v in cfg["cost"].items()})


def build_bounds(cfg: dict) -> ControlBounds:
    return ControlBounds(**{k: float(v) for k, v in cfg["bounds"].items()})


def build_noise(cfg: dict) -> NoiseSpec:
    n = cfg["noise"]
    return NoiseSpec(float(n["control_std"]), float(n["surface_std"]),
                     float(n["measurement_std"]))


def build_gps_config(cfg: dict, seed: int) -> gps.GpsConfig:
    g = cfg["gps"]
    bounds = build_bounds(cfg)
    train = policy_net.TrainConfig(
        learning_rate=float(g["train"]["learning_rate"]),
        epochs=int(g["train"]["epochs"]),
        batch_size=int(g["train"]["batch_size"]),
        momentum=float(g["train"]["momentum"]),
        seed=seed,
        u_min=bounds.vx_min,
        u_max=bounds.vx_max,
    )
    ilqr_cfg = ilqr.ILqrConfig(
        max_iters=int(g["ilqr"]["max_iters"]),
        cost_tol=float(g["ilqr"]["cost_tol"]),
        reg_init=float(g["ilqr"]["reg_init"]),
        reg_min=float(g["ilqr"]["reg_min"]),
        reg_max=float(g["ilqr"]["reg_max"]),
        line_search_backtracks=int(g["ilqr"]["line_search_backtracks"]),
        control_bounds=bounds,
    )
    start = cfg["nozzle"]["start_mm"]
    return gps.GpsConfig(
        n_guides=int(g["guides"]),
        n_samples=int(g["samples_per_guide"]),
        n_iterations=int(g["iterations"]),
        steps_per_pass=int(g["steps_per_pass"]),
        dual_step=float(g["dual_step"]),
        nu_init=float(g["nu_init"]),
        nu_factor_up=float(g["nu_factor_up"]),
        nu_factor_down=float(g["nu_factor_down"]),
        nu_min=float(g["nu_min"]),
        nu_max=float(g["nu_max"]),
        kl_band=tuple(float(v) for v in g["kl_band"]),
        n_hidden=int(g["hidden"]),
        seed=seed,
        convergence_rtol=float(g["convergence_rtol"]),
        nozzle_height=float(cfg["nozzle"]["height_mm"]),
        start_position=None if start is None else float(start),
        weights=build_weights(cfg),
        bounds=bounds,
        noise=build_noise(cfg),
        train=train,
        ilqr=ilqr_cfg,
    )


def build_run_config(cfg: dict, seed: int) -> harness.RunConfig:
    model_true, model_nominal = build_models(cfg)
    r = cfg["run"]
    start = cfg["nozzle"]["start_mm"]
    return harness.RunConfig(
        model_true=model_true,
        model_nominal=model_nominal,
        coupon=build_coupon(cfg),
        nozzle_height=float(cfg["nozzle"]["height_mm"]),
        noise=build_noise(cfg),
        max_passes=int(r["max_passes"]),
        fill_tolerance=float(r["fill_tolerance_mm"]),
        max_steps_per_pass=int(r["max_steps_per_pass"]),
        seed=seed,
        start_position=None if start is None else float(start),
        steps_per_pass=int(cfg["gps"]["steps_per_pass"]),
    )


def build_varying_profile(cfg: dict) -> harness.VaryingSpeed:
    v = cfg["run"]["varying_profile"]
    if v["positions"] is not None and v["speeds"] is not None:
        return harness.VaryingSpeed(np.asarray(v["positions"], dtype=float),
                                    np.asarray(v["speeds"], dtype=float))
    return harness.default_varying_profile(build_grid(cfg), build_coupon(cfg),
                                           fast=float(v["fast"]), slow=float(v["slow"]),
                                           ramp_cells=int(v["ramp_cells"]))


def build_calibration_bounds(cfg: dict) -> ParamBounds:
    b = cfg["calibration"]["bounds"]
    return ParamBounds(build_params(b["lower"]), build_params(b["upper"]))


def build_fit_config(cfg: dict, seed: int) -> FitConfig:
    c = cfg["calibration"]
    return FitConfig(n_starts=int(c["n_starts"]), maxiter=int(c["maxiter"]), seed=seed)
