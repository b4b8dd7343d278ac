"""Sampled control-loop emulation, metrics and experiment drivers.

``run_sampled_loop`` wires a continuous plant, an ideal sampler, a discrete
controller and a zero-order hold: the controller sees the plant only at the
sampling instants (positions always, momenta/velocities only with full-state
feedback), computes one input per interval, and the plant integrates that
held input with an adaptive embedded Runge-Kutta pair.  For structural tests
the plant can be replaced by its second-order implicit-midpoint model.

``run_target_reference`` iterates the implicit-midpoint discretisation of a
target system; this is the curve closed loops are compared against.  The
module also provides the discrete-time L2 norm, the exponential tube
criterion, the maximum-stiffness sweep and convergence-order utilities.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .controllers import (ControllerError, ControllerSpec, ControllerState,
                          linear_impedance_target, make_controller,
                          solve_stage_hamiltonian, solve_stage_lagrangian)
from .dynamics import (HAMILTONIAN_B_D, HamiltonianState, LagrangianState,
                       MechanicalModel, TargetDynamics, legendre_to_hamiltonian)
from .integrators import (DEFAULT_NEWTON, ConvergenceError, NewtonConfig,
                          implicit_midpoint_step, integrate_adaptive,
                          plant_rhs, propagate_plant)
from .models import MassSpringParams, mass_spring_model

Vector = np.ndarray

PLANT_CONTINUOUS = "continuous"
PLANT_MIDPOINT_MODEL = "midpoint_model"


@dataclass(frozen=True)
class LoopConfig:
    """One closed-loop simulation: plant, controller, horizon and tolerances."""

    model: MechanicalModel
    controller: ControllerSpec
    initial: HamiltonianState
    h: float
    T: float
    newton: NewtonConfig = DEFAULT_NEWTON
    plant_rtol: float = 1e-6
    plant_atol: float = 1e-9
    plant: str = PLANT_CONTINUOUS
    label: str = ""

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.T < self.h:
            raise ValueError("T must be at least one sampling interval")
        if self.T / self.h > 2**31:
            raise ValueError("too many steps")
        if self.plant not in (PLANT_CONTINUOUS, PLANT_MIDPOINT_MODEL):
            raise ValueError(f"unknown plant kind {self.plant!r}")
        if isinstance(self.initial, LagrangianState):
            object.__setattr__(self, "initial",
                               legendre_to_hamiltonian(self.model, self.initial))

    @property
    def steps(self) -> int:
        return int(round(self.T / self.h))

    def config_hash(self) -> str:
        key = (self.h, self.T, self.controller.law, self.controller.mode,
               self.controller.feedback, self.plant, self.plant_rtol,
               self.newton.abs_tol, tuple(self.initial.q), tuple(self.initial.p))
        return hashlib.sha256(repr(key).encode()).hexdigest()[:12]


@dataclass
class SimulationTrace:
    """Time-indexed record of one run.

    States are stored at every sampling instant (``K + 1`` rows for ``K``
    completed intervals); inputs, stage values and solver diagnostics are
    stored per interval.
    """

    t: np.ndarray
    q: np.ndarray
    p: np.ndarray
    u: np.ndarray
    q_half: np.ndarray
    x_half: np.ndarray
    newton_iters: np.ndarray
    residual: np.ndarray
    stage_kind: Optional[str] = None
    failed: bool = False
    failure_step: Optional[int] = None
    stopped_early: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.u.shape[0]

    def write_csv(self, path) -> None:
        n = self.q.shape[1]
        cols = (["t"] + [f"q{i+1}" for i in range(n)] + [f"p{i+1}" for i in range(n)]
                + [f"u{i+1}" for i in range(n)] + [f"q_half_{i+1}" for i in range(n)]
                + [f"p_half_{i+1}" for i in range(n)] + ["newton_iters", "residual"])
        K = self.steps
        nanrow = [math.nan] * n
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(self.t.size):
                row = [self.t[k], *self.q[k], *self.p[k]]
                if k < K:
                    row += [*self.u[k], *self.q_half[k], *self.x_half[k],
                            self.newton_iters[k], self.residual[k]]
                else:
                    row += [*nanrow, *nanrow, *nanrow, math.nan, math.nan]
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    def write_metadata(self, path, extra: Optional[dict] = None) -> None:
        meta = dict(self.meta)
        meta.update({
            "failed": self.failed,
            "failure_step": self.failure_step,
            "stopped_early": self.stopped_early,
            "steps": int(self.steps),
            "stage_kind": self.stage_kind,
            "git_revision": _git_revision(),
        })
        if extra:
            meta.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=os.path.dirname(__file__))
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except Exception:
        return "unknown"


def midpoint_model_step(model: MechanicalModel, state: HamiltonianState,
                        u_held: Vector, h: float,
                        cfg: NewtonConfig = DEFAULT_NEWTON) -> HamiltonianState:
    """One step of the second-order discrete-time plant model under held input."""
    x0 = np.concatenate((state.q, state.p))
    x1, report = implicit_midpoint_step(plant_rhs(model, u_held), x0, state.t, h, cfg)
    if not report.converged:
        raise ConvergenceError(f"model step residual {report.final_residual:.3e}")
    n = model.n
    return HamiltonianState(q=x1[:n], p=x1[n:], t=state.t + h)


def run_sampled_loop(cfg: LoopConfig,
                     observer: Optional[Callable[[int, float, Vector, Vector, Vector], bool]] = None
                     ) -> SimulationTrace:
    """Emulate the sampled control loop for ``cfg.steps`` intervals.

    The optional ``observer(k, t_k, q_k, p_k, u_prev)`` is called after each
    completed interval; returning True stops the run early (the trace is
    marked ``stopped_early``).  A controller solve failure truncates the
    trace and marks it ``failed``; a plant integration failure raises.
    """
    model = cfg.model
    n = model.n
    K = cfg.steps
    controller = make_controller(model, cfg.controller, cfg.h, cfg.newton)

    t = np.empty(K + 1)
    q = np.empty((K + 1, n))
    p = np.empty((K + 1, n))
    u = np.empty((K, n))
    q_half = np.full((K, n), np.nan)
    x_half = np.full((K, n), np.nan)
    iters = np.zeros(K, dtype=int)
    residual = np.zeros(K)

    state = cfg.initial
    t[0], q[0], p[0] = state.t, state.q, state.p
    failed = False
    failure_step = None
    stopped = False
    solve_seconds = 0.0
    done = 0

    for k in range(K):
        if controller.measurement == "momentum":
            x = p[k]
        elif controller.measurement == "velocity":
            x = model.solve_mass(q[k], p[k])
        else:
            x = None
        try:
            out = controller.step(q[k], x, t[k])
        except ControllerError:
            failed = True
            failure_step = k
            break
        u[k] = out.u
        if out.q_half is not None:
            q_half[k] = out.q_half
            x_half[k] = out.x_half
        iters[k] = out.iterations
        residual[k] = out.residual
        solve_seconds += out.solve_seconds

        if cfg.plant == PLANT_CONTINUOUS:
            state = propagate_plant(model, state, out.u, cfg.h,
                                    rtol=cfg.plant_rtol, atol=cfg.plant_atol)
        else:
            state = midpoint_model_step(model, state, out.u, cfg.h, cfg.newton)
        t[k + 1], q[k + 1], p[k + 1] = state.t, state.q, state.p
        done = k + 1
        if observer is not None and observer(k + 1, t[k + 1], q[k + 1], p[k + 1], u[k]):
            stopped = True
            break

    meta = {
        "law": cfg.controller.law,
        "mode": cfg.controller.mode,
        "feedback": cfg.controller.feedback,
        "h": cfg.h,
        "T": cfg.T,
        "plant": cfg.plant,
        "plant_rtol": cfg.plant_rtol,
        "newton_abs_tol": cfg.newton.abs_tol,
        "config_hash": cfg.config_hash(),
        "label": cfg.label,
        "mean_solve_ms": 1e3 * solve_seconds / max(done, 1),
    }
    return SimulationTrace(
        t=t[:done + 1], q=q[:done + 1], p=p[:done + 1],
        u=u[:done], q_half=q_half[:done], x_half=x_half[:done],
        newton_iters=iters[:done], residual=residual[:done],
        stage_kind=controller.stage_kind, failed=failed, failure_step=failure_step,
        stopped_early=stopped, meta=meta)


def run_target_reference(target: TargetDynamics,
                         initial,
                         h: float,
                         T: float,
                         model: Optional[MechanicalModel] = None,
                         newton: NewtonConfig = DEFAULT_NEWTON) -> SimulationTrace:
    """Iterate the implicit-midpoint discretisation of a target system.

    For momentum-space targets the coordinate update uses the model inertia,
    so ``model`` is required; velocity-space targets need it only for the
    state dimension.
    """
    K = int(round(T / h))
    if K < 1:
        raise ValueError("horizon shorter than one step")
    if target.kind == HAMILTONIAN_B_D:
        if model is None:
            raise ValueError("momentum-space targets need the model inertia")
        if isinstance(initial, LagrangianState):
            initial = legendre_to_hamiltonian(model, initial)
        xs = initial.p
    else:
        if isinstance(initial, HamiltonianState):
            raise ValueError("velocity-space targets start from a LagrangianState")
        xs = initial.v
    n = len(initial.q)

    t = np.empty(K + 1)
    q = np.empty((K + 1, n))
    p = np.empty((K + 1, n))
    u = np.full((K, n), np.nan)
    q_half = np.empty((K, n))
    x_half = np.empty((K, n))
    iters = np.zeros(K, dtype=int)
    residual = np.zeros(K)

    t[0], q[0], p[0] = initial.t, initial.q, xs
    guess = None
    for k in range(K):
        if target.kind == HAMILTONIAN_B_D:
            qh, xh, report = solve_stage_hamiltonian(model, target, q[k], p[k], h,
                                                     newton, t_k=t[k], guess=guess)
        else:
            qh, xh, _, report = solve_stage_lagrangian(model, target, q[k], None, h,
                                                       newton, t_k=t[k], v_k=p[k])
        if not report.converged:
            raise ConvergenceError(f"target stage solve failed at step {k}")
        q_half[k], x_half[k] = qh, xh
        iters[k], residual[k] = report.iterations, report.final_residual
        q[k + 1] = 2.0 * qh - q[k]
        p[k + 1] = 2.0 * xh - p[k]
        t[k + 1] = t[k] + h
        guess = np.concatenate((qh, xh))

    kind = "momentum" if target.kind == HAMILTONIAN_B_D else "velocity"
    return SimulationTrace(t=t, q=q, p=p, u=u, q_half=q_half, x_half=x_half,
                           newton_iters=iters, residual=residual, stage_kind=kind,
                           meta={"law": "target_reference", "h": h, "T": T})


def discrete_l2_norm(signal, h: float) -> float:
    """(h * sum of squared sample norms)^(1/2) over the given sequence."""
    x = np.asarray(signal, dtype=float)
    if x.size == 0:
        raise ValueError("empty signal")
    return math.sqrt(h * float(np.sum(x * x)))


def tube_criterion(trace, alpha: float, q0: float, h: Optional[float] = None,
                   factor: float = 1.1) -> bool:
    """True when the exponentially reweighted position stays below factor*q0."""
    if isinstance(trace, SimulationTrace):
        if trace.q.shape[1] != 1:
            raise ValueError("tube criterion applies to scalar position traces")
        qs = trace.q[:, 0]
        ts = trace.t
    else:
        if h is None:
            raise ValueError("h is required for raw arrays")
        qs = np.asarray(trace, dtype=float).ravel()
        ts = h * np.arange(qs.size)
    return bool(np.max(np.abs(np.exp(alpha * ts) * qs)) < factor * q0)


# ---------------------------------------------------------------------------
# Maximum-stiffness sweep (scalar mass-spring impedance experiment)


@dataclass
class SweepResult:
    h: list
    rows: list  # dicts with keys h, c_max_qc, input_energy_qc, q_norm_qc,
    #             c_max_symp, u_norm_symp, q_norm_symp

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("h,c_max_qc,c_max_symp,u_norm,q_norm_qc,q_norm_symp\n")
            for r in self.rows:
                fh.write(",".join(repr(float(r[k])) for k in
                                  ("h", "c_max_qc", "c_max_symp", "input_energy_qc",
                                   "q_norm_qc", "q_norm_symp")) + "\n")


def _mass_spring_cell_run(h, T, m, k, q0, c, d, mode, newton, energy_cap):
    """One closed-loop run; returns (passes, u_norm, q_norm).

    Fails fast: the run stops as soon as the tube criterion is violated or
    the running input energy exceeds the cap, both of which are conclusive.
    """
    model = mass_spring_model(MassSpringParams(m=m, k=k))
    target = linear_impedance_target(m, c, d)
    spec = ControllerSpec(law="general_hamiltonian", mode=mode, n=1, target=target)
    cfg = LoopConfig(model=model, controller=spec,
                     initial=HamiltonianState(q=[q0], p=[0.0]), h=h, T=T, newton=newton)
    alpha = 0.1 * d / m
    bound = 1.1 * q0
    cap_sq = None if energy_cap is None else energy_cap * energy_cap * (1.0 + 1e-9)
    acc = {"uu": 0.0}

    def observer(kk, t, q, p, u):
        acc["uu"] += float(u @ u)
        if cap_sq is not None and h * acc["uu"] > cap_sq:
            return True
        return abs(math.exp(alpha * t) * q[0]) >= bound

    trace = run_sampled_loop(cfg, observer=observer)
    if trace.failed or trace.stopped_early or trace.steps < cfg.steps:
        return False, math.nan, math.nan
    if not tube_criterion(trace, alpha, q0):
        return False, math.nan, math.nan
    u_norm = discrete_l2_norm(trace.u, h)
    q_norm = discrete_l2_norm(trace.q, h)
    if energy_cap is not None and u_norm > energy_cap:
        return False, u_norm, q_norm
    return True, u_norm, q_norm


def _largest_passing(c_values, evaluate, coarse_stride):
    """Largest value in ``c_values`` for which ``evaluate`` passes.

    A coarse subsample brackets the pass/fail boundary first; the fine grid
    is then scanned inside the bracket.  If the coarse pattern is not
    monotone (a pass above a failure) the whole grid is scanned instead, so
    the result always equals the full-scan answer on monotone data.
    """
    nc = len(c_values)
    results = {}
    coarse = sorted(set(range(0, nc, coarse_stride)) | {nc - 1})
    for i in coarse:
        results[i] = evaluate(c_values[i])
    fails = [i for i in coarse if not results[i][0]]
    passes = [i for i in coarse if results[i][0]]
    if fails and passes and max(passes) > min(fails):
        scan = [i for i in range(nc) if i not in results]  # non-monotone: full scan
    elif not passes:
        scan = list(range(0, min(coarse_stride, nc)))
    else:
        i_star = max(passes)
        scan = list(range(i_star + 1, min(i_star + coarse_stride, nc)))
    for i in scan:
        if i not in results:
            results[i] = evaluate(c_values[i])
    winners = [i for i, r in results.items() if r[0]]
    if not winners:
        return None
    i_max = max(winners)
    return c_values[i_max], results[i_max]


def _sweep_cell(payload):
    (h, c_values, m, k, d, T, q0, newton, coarse_stride) = payload
    row = {"h": h, "c_max_qc": math.nan, "input_energy_qc": math.nan,
           "q_norm_qc": math.nan, "c_max_symp": math.nan,
           "u_norm_symp": math.nan, "q_norm_symp": math.nan}

    qc = _largest_passing(
        c_values,
        lambda c: _mass_spring_cell_run(h, T, m, k, q0, c, d, "quasi_continuous", newton, None),
        coarse_stride)
    if qc is None:
        return row
    row["c_max_qc"], (_, row["input_energy_qc"], row["q_norm_qc"]) = qc

    cap = row["input_energy_qc"]
    symp = _largest_passing(
        c_values,
        lambda c: _mass_spring_cell_run(h, T, m, k, q0, c, d, "symplectic", newton, cap),
        coarse_stride)
    if symp is not None:
        row["c_max_symp"], (_, row["u_norm_symp"], row["q_norm_symp"]) = symp
    return row


def sweep_max_stiffness(h_grid: Sequence[float],
                        c_grid: Sequence[float],
                        base_params: MassSpringParams = MassSpringParams(),
                        d: float = 0.1,
                        T: float = 100.0,
                        q_0: float = 1.0,
                        newton: NewtonConfig = DEFAULT_NEWTON,
                        workers: Optional[int] = None,
                        coarse_stride: int = 20) -> SweepResult:
    """Maximum assignable stiffness per sampling time, for both controllers.

    For each h the quasi-continuous limit is the largest c in ``c_grid``
    whose closed loop satisfies the tube criterion; the input norm at that
    stiffness becomes the energy budget for the symplectic scan, which must
    satisfy the tube criterion and stay within the budget.  Cells run in
    parallel processes (capped by ``workers`` or SIMCTL_THREADS).
    """
    h_grid = sorted(float(h) for h in h_grid)
    c_values = [float(c) for c in sorted(c_grid)]
    if not h_grid:
        raise ValueError("empty h grid")
    if not c_values:
        raise ValueError("empty c grid")
    payloads = [(h, c_values, base_params.m, base_params.k, d, T, q_0, newton, coarse_stride)
                for h in h_grid]
    if workers is None:
        workers = int(os.environ.get("SIMCTL_THREADS", os.cpu_count() or 1))
    workers = max(1, min(workers, len(payloads)))
    if workers == 1:
        rows = [_sweep_cell(pl) for pl in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, payloads))
    rows.sort(key=lambda r: r["h"])
    return SweepResult(h=[r["h"] for r in rows], rows=rows)


# ---------------------------------------------------------------------------
# Convergence studies


def sample_ode(rhs, x0, times, rtol: float = 1e-10, atol: float = 1e-13) -> np.ndarray:
    """Integrate dx/dt = rhs(x, t) and return states at the given times."""
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, np.atleast_1d(np.asarray(x0)).size))
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    out[0] = x
    for i in range(times.size - 1):
        x = integrate_adaptive(rhs, x, times[i], times[i + 1], rtol=rtol, atol=atol)
        out[i + 1] = x
    return out


def continuous_target_rhs(target: TargetDynamics,
                          model: Optional[MechanicalModel] = None):
    """Right-hand side of the continuous-time target system on stacked states."""
    if target.kind == HAMILTONIAN_B_D:
        if model is None:
            raise ValueError("momentum-space targets need the model inertia")
        n = model.n

        def rhs(x, t):
            q, p = x[:n], x[n:]
            return np.concatenate((model.solve_mass(q, p), target.rhs(q, p, t)))
    else:
        def rhs(x, t):
            half = x.size // 2
            return np.concatenate((x[half:], target.rhs(x[:half], x[half:], t)))
    return rhs


def empirical_orders(errors: Sequence[float]) -> np.ndarray:
    """log2 of successive error ratios for a step-halving sequence."""
    e = np.asarray(errors, dtype=float)
    if e.size < 2:
        raise ValueError("need at least two errors")
    return np.log2(e[:-1] / e[1:])


def convergence_study(error_fn: Callable[[float, float], float],
                      h_list: Sequence[float],
                      reference_tolerance: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Empirical orders of ``error_fn(h, reference_tolerance)`` over ``h_list``.

    ``h_list`` must be a halving sequence (each step half the previous one).
    """
    h_list = [float(h) for h in h_list]
    if len(h_list) < 2:
        raise ValueError("need at least two step sizes")
    for a, b in zip(h_list, h_list[1:]):
        if abs(b - 0.5 * a) > 1e-12 * a:
            raise ValueError("h_list must halve at each entry")
    errors = np.array([error_fn(h, reference_tolerance) for h in h_list])
    return empirical_orders(errors), errors
