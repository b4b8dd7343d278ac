"""Command-line entry point for the shipped experiments.

    simctl run         --experiment <name> [--h s] [--T s] [--out dir] ...
    simctl sweep       [--config file] [--out dir]
    simctl convergence [--config file] [--out dir]

Configuration is a flat JSON file of key/value pairs; command-line flags
override file entries.  Numeric defaults reproduce the benchmark settings:
PD set-point control at h in {0.02, 0.15} s with K = D = diag(0.1, 0.1),
circle tracking at h in {0.04, 0.08, 0.15} s with M_d = diag(0.1, 0.013),
K = diag(0.3, 0.03), D = diag(0.3, 0.03), and the stiffness sweep over
h in {0.02, ..., 0.20} s.  Exit codes: 0 success, 1 configuration error,
2 solver or acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .controllers import ControllerError, ControllerSpec, computed_torque_target, \
    linear_impedance_target, pd_hamiltonian_target
from .dynamics import HamiltonianState, LagrangianState
from .harness import (LoopConfig, convergence_study, discrete_l2_norm,
                      midpoint_model_step, run_sampled_loop,
                      run_target_reference, sample_ode, continuous_target_rhs,
                      sweep_max_stiffness)
from .integrators import (ConvergenceError, NewtonConfig, StepUnderflowError,
                          propagate_plant)
from .models import (CircleReference, MassSpringParams, TwoLinkParams,
                     circle_reference, forward_kinematics, mass_spring_model,
                     two_link_model)

EXPERIMENTS = ("mass_spring_impedance", "two_link_pd", "two_link_computed_torque",
               "sweep", "convergence", "custom")

# Benchmark constants.  PD: stiffness/damping and initial configuration for
# upright set-point stabilisation; tracking: shaped error dynamics and the
# 0.1 rad/s reference circle; sweep: scalar plant, tube decay rate 0.1*d/m.
PD_GAIN = 0.1
PD_SAMPLING_TIMES = (0.02, 0.15)
TRACKING_M_D = (0.1, 0.013)
TRACKING_K = (0.3, 0.03)
TRACKING_D = (0.3, 0.03)
TRACKING_OMEGA = 0.1
TRACKING_SAMPLING_TIMES = (0.04, 0.08, 0.15)
SWEEP_H_GRID = tuple(round(0.02 * i, 2) for i in range(1, 11))
SWEEP_C_STEP = 0.05
SWEEP_T = 100.0

DEFAULTS = {
    "experiment": "two_link_pd",
    "h": None,
    "T": None,
    "mode": "both",            # symplectic | quasi | both
    "feedback": "position",    # position | full (applies to the symplectic loop)
    "out": "results",
    "c": 2.0,
    "d": 0.1,
    "q0": 1.0,
    "newton_abs_tol": 1e-10,
    "plant_rtol": 1e-6,
    "h_grid": list(SWEEP_H_GRID),
    "c_min": 0.55,
    "c_max": 40.0,
    "c_step": SWEEP_C_STEP,
    "sweep_T": SWEEP_T,
    "workers": None,
    "conv_h_list": [0.02, 0.01, 0.005],
    "conv_T": 1.0,
}


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a flat JSON object")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return data


def _resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(_load_config(args.config))
    for key in ("experiment", "h", "T", "mode", "feedback", "out"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
    if cfg["h"] is not None and cfg["h"] <= 0:
        raise ConfigError("h must be positive")
    if cfg["T"] is not None and cfg["T"] <= 0:
        raise ConfigError("T must be positive")
    if cfg["mode"] not in ("symplectic", "quasi", "both"):
        raise ConfigError("mode must be symplectic, quasi or both")
    if cfg["feedback"] not in ("position", "full"):
        raise ConfigError("feedback must be position or full")
    if not cfg["h_grid"]:
        raise ConfigError("h_grid must not be empty")
    if cfg["newton_abs_tol"] <= 0:
        raise ConfigError("newton_abs_tol must be positive")
    if cfg["plant_rtol"] <= 0:
        raise ConfigError("plant_rtol must be positive")
    return cfg


def _out_dir(cfg) -> str:
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


def _feedback_name(cfg) -> str:
    return "position_only" if cfg["feedback"] == "position" else "full_state"


def _modes(cfg) -> list:
    if cfg["mode"] == "both":
        return ["symplectic", "quasi_continuous"]
    return ["symplectic" if cfg["mode"] == "symplectic" else "quasi_continuous"]


def _write(trace, out, name, cfg_echo):
    csv_path = os.path.join(out, name + ".csv")
    trace.write_csv(csv_path)
    trace.write_metadata(os.path.join(out, name + ".json"), extra={"config": cfg_echo})
    return csv_path


def _summary_entry(trace, target_trace, h):
    n_cmp = min(trace.q.shape[0], target_trace.q.shape[0])
    dev = float(np.max(np.abs(trace.q[:n_cmp] - target_trace.q[:n_cmp])))
    return {
        "max_deviation_from_target": dev,
        "final_deviation_from_target": float(np.max(np.abs(trace.q[n_cmp - 1] - target_trace.q[n_cmp - 1]))),
        "u_norm_h": discrete_l2_norm(trace.u, h) if trace.steps else math.nan,
        "q_norm_h": discrete_l2_norm(trace.q, h),
        "max_residual": float(np.max(trace.residual)) if trace.steps else math.nan,
        "mean_solve_ms": trace.meta.get("mean_solve_ms"),
        "failed": trace.failed,
    }


def cmd_run(cfg) -> int:
    out = _out_dir(cfg)
    experiment = cfg["experiment"]
    newton = NewtonConfig(abs_tol=cfg["newton_abs_tol"])
    summary = {"experiment": experiment, "config": cfg, "runs": {}}

    if experiment == "mass_spring_impedance":
        h = cfg["h"] if cfg["h"] is not None else 0.1
        T = cfg["T"] if cfg["T"] is not None else 30.0
        model = mass_spring_model(MassSpringParams())
        target = linear_impedance_target(1.0, cfg["c"], cfg["d"])
        initial = HamiltonianState(q=[cfg["q0"]], p=[0.0])
        target_trace = run_target_reference(target, initial, h, T, model=model, newton=newton)
        _write(target_trace, out, "mass_spring_impedance_target", cfg)
        for mode in _modes(cfg):
            feedback = _feedback_name(cfg) if mode == "symplectic" else "full_state"
            spec = ControllerSpec(law="general_hamiltonian", mode=mode, feedback=feedback,
                                  n=1, target=target)
            trace = run_sampled_loop(LoopConfig(model=model, controller=spec, initial=initial,
                                                h=h, T=T, newton=newton,
                                                plant_rtol=cfg["plant_rtol"], label=mode))
            _write(trace, out, f"mass_spring_impedance_{mode}", cfg)
            summary["runs"][mode] = _summary_entry(trace, target_trace, h)

    elif experiment == "two_link_pd":
        h = cfg["h"] if cfg["h"] is not None else PD_SAMPLING_TIMES[0]
        T = cfg["T"] if cfg["T"] is not None else 30.0
        params = TwoLinkParams()
        model = two_link_model(params)
        K = np.diag([PD_GAIN, PD_GAIN])
        D = np.diag([PD_GAIN, PD_GAIN])
        q_d = np.zeros(2)
        initial = HamiltonianState(q=[math.pi, 0.0], p=[0.0, 0.0])
        target = pd_hamiltonian_target(model, K, D, q_d)
        target_trace = run_target_reference(target, initial, h, T, model=model, newton=newton)
        _write(target_trace, out, "two_link_pd_target", cfg)
        for mode in _modes(cfg):
            feedback = _feedback_name(cfg) if mode == "symplectic" else "full_state"
            spec = ControllerSpec(law="pd_gravity", mode=mode, feedback=feedback, n=2,
                                  K=K, D=D, q_d=q_d)
            trace = run_sampled_loop(LoopConfig(model=model, controller=spec, initial=initial,
                                                h=h, T=T, newton=newton,
                                                plant_rtol=cfg["plant_rtol"], label=mode))
            _write(trace, out, f"two_link_pd_{mode}", cfg)
            summary["runs"][mode] = _summary_entry(trace, target_trace, h)

    elif experiment == "two_link_computed_torque":
        h = cfg["h"] if cfg["h"] is not None else TRACKING_SAMPLING_TIMES[0]
        period = 2.0 * math.pi / TRACKING_OMEGA
        T = cfg["T"] if cfg["T"] is not None else 2.0 * period
        params = TwoLinkParams()
        model = two_link_model(params)
        ref = CircleReference(params, omega=TRACKING_OMEGA)
        M_d = np.diag(TRACKING_M_D)
        K = np.diag(TRACKING_K)
        D = np.diag(TRACKING_D)
        q0, v0, _ = circle_reference(ref, 0.0)
        initial = LagrangianState(q=q0, v=v0)
        f_d = computed_torque_target(M_d, K, D, ref)
        target_trace = run_target_reference(f_d, initial, h, T, model=model, newton=newton)
        _write(target_trace, out, "two_link_computed_torque_target", cfg)
        _write_tcp(target_trace, params, out, "two_link_computed_torque_tcp_target")
        for mode in _modes(cfg):
            feedback = _feedback_name(cfg) if mode == "symplectic" else "full_state"
            spec = ControllerSpec(law="computed_torque", mode=mode, feedback=feedback, n=2,
                                  M_d=M_d, K=K, D=D, reference=ref)
            trace = run_sampled_loop(LoopConfig(model=model, controller=spec, initial=initial,
                                                h=h, T=T, newton=newton,
                                                plant_rtol=cfg["plant_rtol"], label=mode))
            _write(trace, out, f"two_link_computed_torque_{mode}", cfg)
            _write_tcp(trace, params, out, f"two_link_computed_torque_tcp_{mode}")
            summary["runs"][mode] = _summary_entry(trace, target_trace, h)

    else:
        raise ConfigError(f"experiment {experiment!r} is not runnable via 'run'")

    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    failed = any(r.get("failed") for r in summary["runs"].values())
    return 2 if failed else 0


def _write_tcp(trace, params, out, name):
    path = os.path.join(out, name + ".csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,x_TCP,y_TCP\n")
        for t, q in zip(trace.t, trace.q):
            xi = forward_kinematics(params, q)
            fh.write(f"{t!r},{xi[0]!r},{xi[1]!r}\n")
    return path


def cmd_sweep(cfg) -> int:
    out = _out_dir(cfg)
    n_c = int(round((cfg["c_max"] - cfg["c_min"]) / cfg["c_step"])) + 1
    c_grid = [cfg["c_min"] + i * cfg["c_step"] for i in range(n_c)]
    result = sweep_max_stiffness(
        cfg["h_grid"], c_grid, MassSpringParams(), d=cfg["d"], T=cfg["sweep_T"],
        q_0=cfg["q0"], newton=NewtonConfig(abs_tol=cfg["newton_abs_tol"]),
        workers=cfg["workers"])
    result.to_csv(os.path.join(out, "sweep.csv"))
    with open(os.path.join(out, "sweep_summary.json"), "w", encoding="utf-8") as fh:
        json.dump({"config": cfg, "rows": result.rows}, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    bad = [r for r in result.rows
           if not math.isnan(r["c_max_qc"]) and not math.isnan(r["c_max_symp"])
           and r["c_max_symp"] < r["c_max_qc"]]
    return 2 if bad else 0


def _convergence_rows(cfg):
    """Global convergence orders of the discrete model and both closed loops."""
    params = TwoLinkParams()
    model = two_link_model(params)
    h_list = [float(h) for h in cfg["conv_h_list"]]
    T = float(cfg["conv_T"])
    newton = NewtonConfig(abs_tol=1e-12)
    rows = []

    q0 = np.array([math.pi, 0.0])
    initial = HamiltonianState(q=q0, p=[0.0, 0.0])
    rng = np.random.default_rng(7)
    u_held = 0.2 * rng.standard_normal(2)

    def model_error(h, ref_tol):
        steps = int(round(T / h))
        state = initial
        for _ in range(steps):
            state = midpoint_model_step(model, state, u_held, h, newton)
        ref = propagate_plant(model, initial, u_held, T, rtol=ref_tol, atol=ref_tol * 1e-3)
        return float(np.max(np.abs(np.concatenate((state.q, state.p))
                                   - np.concatenate((ref.q, ref.p)))))

    orders, errors = convergence_study(model_error, h_list)
    rows.append(("midpoint_model", h_list, errors, orders, (1.8, 2.2)))

    K = np.diag([PD_GAIN, PD_GAIN])
    D = np.diag([PD_GAIN, PD_GAIN])
    q_d = np.zeros(2)
    target = pd_hamiltonian_target(model, K, D, q_d)
    x0 = np.concatenate((q0, np.zeros(2)))
    t_common = np.arange(0.0, T + 1e-12, max(h_list))

    def loop_error(mode):
        def err(h, ref_tol):
            ref = sample_ode(continuous_target_rhs(target, model), x0, t_common,
                             rtol=ref_tol, atol=ref_tol * 1e-3)
            spec = ControllerSpec(law="pd_gravity", mode=mode, n=2, K=K, D=D, q_d=q_d)
            trace = run_sampled_loop(LoopConfig(model=model, controller=spec,
                                                initial=initial, h=h, T=T, newton=newton,
                                                plant_rtol=1e-9, plant_atol=1e-12))
            stride = int(round(max(h_list) / h))
            xs = np.hstack((trace.q[::stride], trace.p[::stride]))
            return float(np.max(np.abs(xs - ref)))
        return err

    orders, errors = convergence_study(loop_error("symplectic"), h_list)
    rows.append(("symplectic_pd_loop", h_list, errors, orders, (1.8, 2.2)))
    orders, errors = convergence_study(loop_error("quasi_continuous"), h_list)
    rows.append(("quasi_continuous_pd_loop", h_list, errors, orders, (0.8, 1.2)))
    return rows


def cmd_convergence(cfg) -> int:
    if len(cfg["conv_h_list"]) < 3:
        raise ConfigError("conv_h_list needs at least 3 halving step sizes")
    out = _out_dir(cfg)
    rows = _convergence_rows(cfg)
    ok = True
    with open(os.path.join(out, "convergence.csv"), "w", encoding="utf-8") as fh:
        fh.write("study,h,error,order,band_lo,band_hi\n")
        for name, h_list, errors, orders, band in rows:
            for i, h in enumerate(h_list):
                order = orders[i - 1] if i > 0 else math.nan
                fh.write(f"{name},{h!r},{errors[i]!r},{order!r},{band[0]!r},{band[1]!r}\n")
            if not all(band[0] <= o <= band[1] for o in orders):
                ok = False
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simctl",
                                     description="symplectic discrete-time control experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("sweep", cmd_sweep), ("convergence", cmd_convergence)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--experiment", default=None, choices=EXPERIMENTS)
        p.add_argument("--h", type=float, default=None, help="sampling time [s]")
        p.add_argument("--T", type=float, default=None, help="horizon [s]")
        p.add_argument("--mode", default=None, choices=("symplectic", "quasi", "both"))
        p.add_argument("--feedback", default=None, choices=("position", "full"))
        p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"simctl: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(cfg)
    except ConfigError as exc:
        print(f"simctl: configuration error: {exc}", file=sys.stderr)
        return 1
    except (ControllerError, ConvergenceError, StepUnderflowError) as exc:
        print(f"simctl: solver failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
