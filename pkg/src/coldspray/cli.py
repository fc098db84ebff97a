"""Command-line front end.

Subcommands: simulate, calibrate, ilqr, train-gps, run-closed-loop,
baseline, compare, plot.  Global flags --config/--seed/--out apply to all of
them; outputs land in <out>/<subcommand>-<seed>/.  Exit codes: 0 success,
1 usage or configuration error, 2 numerical failure (diagnostics.json is
written next to the outputs).
"""

from __future__ import annotations

import argparse
import csv
import json
import pathlib
import sys

import numpy as np

from . import calibration, gps, harness, ilqr, policy as policy_net
from .config import (
    ConfigError,
    build_bounds,
    build_calibration_bounds,
    build_coupon,
    build_fit_config,
    build_gps_config,
    build_grid,
    build_models,
    build_run_config,
    build_varying_profile,
    build_weights,
    load_config,
)
from .costs import PerPassCost
from .errors import ColdsprayError
from .model import (
    SimState,
    NozzleState,
    coupon_target,
    make_coupon,
    rollout,
    write_profile_csv,
)

USAGE_ERROR = 1
NUMERICAL_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_speeds_csv(path, speeds) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "speed_mm_s"])
        for t, v in enumerate(speeds):
            writer.writerow([t, repr(float(v))])


def _out_dir(args, subcommand: str) -> pathlib.Path:
    out = pathlib.Path(args.out) / f"{subcommand}-{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_simulate(args, cfg, out: pathlib.Path) -> int:
    model_true, _ = build_models(cfg)
    grid = model_true.grid
    coupon = make_coupon(build_coupon(cfg), grid)
    start = cfg["nozzle"]["start_mm"]
    state = SimState(coupon, NozzleState(grid.x0 if start is None else float(start),
                                         float(cfg["nozzle"]["height_mm"]), 0.0))
    steps = calibration.pass_steps(grid, args.speed)
    controls = np.tile([args.speed, 0.0, 0.0], (steps, 1))
    traj = rollout(state, controls, grid, model_true.params, seed=args.seed)
    write_profile_csv(out / "initial_profile.csv", coupon)
    write_profile_csv(out / "profile.csv", traj.states[-1][: grid.n_cells])
    _write_speeds_csv(out / "speeds.csv", controls[:, 0])
    print(f"simulated one pass at {args.speed} mm/s -> {out / 'profile.csv'}")
    return 0


def _cmd_calibrate(args, cfg, out: pathlib.Path) -> int:
    cal = cfg["calibration"]
    if cal["dataset_dir"]:
        dataset = calibration.load_dataset(cal["dataset_dir"])
    else:
        model_true, _ = build_models(cfg)
        grid = model_true.grid
        coupon = make_coupon(build_coupon(cfg), grid)
        dataset = calibration.make_synthetic_dataset(
            grid, model_true.params, float(cfg["nozzle"]["height_mm"]),
            cal["speeds"], coupon, noise_std=float(cal["noise_std_mm"]),
            seed=args.seed, train_indices=cal["train_passes"],
            val_indices=cal["val_passes"])
        calibration.save_dataset(out / "dataset", dataset)
    params, report = calibration.fit(dataset, build_calibration_bounds(cfg),
                                     config=build_fit_config(cfg, args.seed))
    _write_json(out / "fit_report.json", report.to_dict())
    xs = dataset.grid.cell_centers
    for i, pred in enumerate(report.predictions):
        with open(out / f"prediction_pass_{i:02d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x_mm", "measured_mm", "predicted_mm"])
            for x, m, p in zip(xs, dataset.passes[i].after, pred):
                writer.writerow([repr(float(x)), repr(float(m)), repr(float(p))])
    print(f"calibrated params: {params}")
    return 0


def _cmd_ilqr(args, cfg, out: pathlib.Path) -> int:
    model_true, _ = build_models(cfg)
    grid = model_true.grid
    coupon = make_coupon(build_coupon(cfg), grid)
    target = coupon_target(build_coupon(cfg), grid)
    gps_cfg = build_gps_config(cfg, args.seed)
    problem = gps.make_problem(gps_cfg, model_true, coupon, target)
    goal = problem.schedule.goals[0]
    cost = PerPassCost(goal, build_weights(cfg), problem.n_u)
    controller = ilqr.solve(problem.guide_x0(0), cost, gps_cfg.steps_per_pass,
                            problem.dynamics, gps_cfg.ilqr)
    controller.save_json(out / "controller.json")
    write_profile_csv(out / "nominal_final_profile.csv",
                      controller.nominal_states[-1][: grid.n_cells])
    _write_speeds_csv(out / "nominal_speeds.csv", controller.nominal_controls[:, 0])
    cost_value = ilqr.controller_cost(controller, cost)
    _write_json(out / "solve_summary.json", {"nominal_cost": cost_value})
    print(f"solved first-pass controller, nominal cost {cost_value:.6g}")
    return 0


def _cmd_train_gps(args, cfg, out: pathlib.Path) -> int:
    model_true, model_nominal = build_models(cfg)
    grid = model_nominal.grid
    coupon_spec = build_coupon(cfg)
    coupon = make_coupon(coupon_spec, grid)
    target = coupon_target(coupon_spec, grid)
    gps_cfg = build_gps_config(cfg, args.seed)
    # training runs on the nominal (believed) model
    policy, diag = gps.run(gps_cfg, model_nominal, coupon, target)
    policy_net.save_checkpoint(out / "policy.json", policy)
    for i, guide in enumerate(diag.guides):
        guide.save_json(out / f"guide_{i:02d}.json")
    _write_json(out / "manifest.json", {
        "seed": args.seed,
        "config": cfg,
        "converged": diag.converged,
        "iterations": diag.iterations,
    })
    print(f"trained policy over {len(diag.iterations)} iterations "
          f"(converged={diag.converged}) -> {out / 'policy.json'}")
    return 0


def _load_policy(args, out_root: pathlib.Path) -> policy_net.PolicyParams:
    if args.checkpoint:
        return policy_net.load_checkpoint(args.checkpoint)
    default = pathlib.Path(args.out) / f"train-gps-{args.seed}" / "policy.json"
    if not default.exists():
        raise ConfigError(
            f"no checkpoint given and {default} not found; run train-gps first or pass --checkpoint")
    return policy_net.load_checkpoint(default)


def _cmd_run_closed_loop(args, cfg, out: pathlib.Path) -> int:
    policy = _load_policy(args, out)
    run_cfg = build_run_config(cfg, args.seed)
    report = harness.closed_loop_run(run_cfg, policy)
    _write_json(out / "report.json", report.to_dict())
    write_profile_csv(out / "final_profile.csv", report.final_surface)
    for k, speeds in enumerate(report.speed_profiles):
        _write_speeds_csv(out / f"speeds_pass_{k:02d}.csv", speeds)
    print(f"closed loop: {report.passes_executed} passes, "
          f"material {report.material:.4g}, RMSE {report.terminal_rmse:.4g} mm")
    return 0


def _cmd_baseline(args, cfg, out: pathlib.Path) -> int:
    run_cfg = build_run_config(cfg, args.seed)
    if args.kind == "constant":
        controller = harness.ConstantSpeed(float(cfg["run"]["constant_speed"]))
    else:
        controller = build_varying_profile(cfg)
    report = harness.baseline_run(run_cfg, controller)
    _write_json(out / "report.json", report.to_dict())
    write_profile_csv(out / "final_profile.csv", report.final_surface)
    print(f"baseline {args.kind}: {report.passes_executed} passes, "
          f"material {report.material:.4g}, RMSE {report.terminal_rmse:.4g} mm")
    return 0


def _cmd_compare(args, cfg, out: pathlib.Path) -> int:
    policy = _load_policy(args, out)
    run_cfg = build_run_config(cfg, args.seed)
    result = harness.compare_runs(
        run_cfg, policy,
        constant=harness.ConstantSpeed(float(cfg["run"]["constant_speed"])),
        varying=build_varying_profile(cfg))
    for name in ("gpsc", "constant", "varying"):
        _write_json(out / f"report_{name}.json", result[name].to_dict())
    _write_json(out / "savings.json", result["savings_table"])
    with open(out / "savings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["controller", "material_volume_mm3_per_mm", "passes",
                         "terminal_rmse_mm", "tolerance_met", "gpsc_savings_fraction"])
        for row in result["savings_table"]:
            writer.writerow([row["controller"], repr(row["material_volume_mm3_per_mm"]),
                             row["passes"], repr(row["terminal_rmse_mm"]),
                             row["tolerance_met"],
                             repr(row.get("gpsc_savings_fraction", 0.0))])
    for row in result["savings_table"]:
        saved = row.get("gpsc_savings_fraction")
        extra = f", gpsc saves {100 * saved:.1f}%" if saved is not None else ""
        print(f"{row['controller']}: material {row['material_volume_mm3_per_mm']:.4g}"
              f" over {row['passes']} passes{extra}")
    return 0


def _cmd_plot(args, cfg, out: pathlib.Path) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    source = pathlib.Path(args.input)
    with open(source, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows)
    fig, ax = plt.subplots(figsize=(7, 4))
    if len(header) == 1:
        ax.plot(data[:, 0])
        ax.set_xlabel("cell")
        ax.set_ylabel(header[0])
    else:
        for j in range(1, len(header)):
            ax.plot(data[:, 0], data[:, j], label=header[j])
        ax.set_xlabel(header[0])
        ax.legend()
    ax.grid(True, alpha=0.3)
    target = out / (source.stem + ".svg")
    fig.savefig(target, format="svg")
    plt.close(fig)
    print(f"wrote {target}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coldspray",
                     description="Deposition simulation, calibration and learned speed control")
    parser.add_argument("--config", default=None, help="JSON scenario config")
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--out", default="runs", help="output root directory")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="single constant-speed pass, CSV export")
    p.add_argument("--speed", type=float, default=1.0)

    sub.add_parser("calibrate", help="fit spray parameters (synthetic data unless configured)")
    sub.add_parser("ilqr", help="solve the first-pass guiding controller")
    sub.add_parser("train-gps", help="full guided training loop, writes a policy checkpoint")

    p = sub.add_parser("run-closed-loop", help="deploy a trained policy per pass")
    p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("baseline", help="open-loop baseline run")
    p.add_argument("--kind", choices=["constant", "varying"], default="constant")

    p = sub.add_parser("compare", help="paired policy vs. baseline runs with savings table")
    p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("plot", help="CSV to SVG line plot")
    p.add_argument("--input", required=True)

    return parser


_COMMANDS = {
    "simulate": _cmd_simulate,
    "calibrate": _cmd_calibrate,
    "ilqr": _cmd_ilqr,
    "train-gps": _cmd_train_gps,
    "run-closed-loop": _cmd_run_closed_loop,
    "baseline": _cmd_baseline,
    "compare": _cmd_compare,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as err:
        print(f"coldspray: {err}", file=sys.stderr)
        return USAGE_ERROR

    out = _out_dir(args, args.subcommand)
    try:
        return _COMMANDS[args.subcommand](args, cfg, out)
    except ConfigError as err:
        print(f"coldspray: {err}", file=sys.stderr)
        return USAGE_ERROR
    except ColdsprayError as err:
        diagnostics = {"error": type(err).__name__, "message": str(err),
                       "subcommand": args.subcommand, "seed": args.seed}
        _write_json(out / "diagnostics.json", diagnostics)
        print(f"coldspray: numerical failure: {err}", file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
