"""Discrete-time control laws built on implicit midpoint stage values.

The symplectic laws solve, once per sampling interval, the coupled stage
system

    M(q_half) (q_half - q_k) = h/2 p_half
    p_half - p_k             = h/2 b_d(q_half, p_half)

(or its velocity-space analogue) and evaluate the feedback at the stage
values.  With pure position feedback the momentum at the sampling instant is
reconstructed from consecutive position stage values,

    p_k = M(q_k) (q_half - q_half_prev) / h,

and eliminated from the stage system by substitution, which keeps the Newton
system at 2n unknowns with an identical solution.  Quasi-continuous variants
evaluate the corresponding continuous-time law at the sampled state and are
the baselines the symplectic laws are compared against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import (HAMILTONIAN_B_D, LAGRANGIAN_F_D, MechanicalModel,
                       TargetDynamics, hamiltonian_q_gradient,
                       kinetic_q_gradient, lagrangian_drift)
from .integrators import DEFAULT_NEWTON, NewtonConfig, StepReport, newton_solve

Vector = np.ndarray
Matrix = np.ndarray

LAWS = ("potential_shaping", "general_hamiltonian", "lagrangian_general",
        "pd_gravity", "computed_torque")
MODES = ("symplectic", "quasi_continuous")
FEEDBACKS = ("full_state", "position_only")


class ControllerError(RuntimeError):
    """A per-sample stage solve failed to converge."""

    def __init__(self, message: str, report: Optional[StepReport] = None):
        super().__init__(message)
        self.report = report


@dataclass
class ControllerState:
    """Mutable per-loop controller memory.

    ``q_half_prev`` stores the stage value computed in the preceding
    interval; ``v0_or_p0`` seeds the very first interval, where no previous
    stage value exists yet.
    """

    q_half_prev: Optional[Vector]
    v0_or_p0: Vector
    first_step: bool = True


def _check_design_matrix(A, n: int, name: str, definite: bool) -> Optional[Matrix]:
    if A is None:
        return None
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape != (n, n):
        raise ValueError(f"{name} must have shape ({n}, {n}), got {A.shape}")
    scale = max(1.0, float(np.abs(A).max()))
    if np.abs(A - A.T).max() > 1e-12 * scale:
        raise ValueError(f"{name} must be symmetric")
    eigmin = float(np.linalg.eigvalsh(A).min())
    if definite and eigmin <= 0.0:
        raise ValueError(f"{name} must be positive definite")
    if not definite and eigmin < -1e-12 * scale:
        raise ValueError(f"{name} must be positive semidefinite")
    return A


@dataclass(frozen=True)
class ControllerSpec:
    """Which control law to run, in which mode, with which design data."""

    law: str
    mode: str = "symplectic"
    feedback: str = "full_state"
    n: int = 1
    K: Optional[Matrix] = None
    D: Optional[Matrix] = None
    M_d: Optional[Matrix] = None
    q_d: Optional[Vector] = None
    V_d_gradient: Optional[Callable[[Vector], Vector]] = None
    target: Optional[TargetDynamics] = None
    reference: Optional[Callable[[float], tuple]] = None
    x0_feedback: Optional[Vector] = None  # initial momentum/velocity for reconstruction

    def __post_init__(self):
        if self.law not in LAWS:
            raise ValueError(f"unknown law {self.law!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.feedback not in FEEDBACKS:
            raise ValueError(f"unknown feedback {self.feedback!r}")
        n = self.n
        object.__setattr__(self, "K", _check_design_matrix(self.K, n, "K", definite=False))
        object.__setattr__(self, "D", _check_design_matrix(self.D, n, "D", definite=False))
        object.__setattr__(self, "M_d", _check_design_matrix(self.M_d, n, "M_d", definite=True))
        if self.q_d is not None:
            object.__setattr__(self, "q_d", np.atleast_1d(np.asarray(self.q_d, dtype=float)))
        if self.x0_feedback is not None:
            object.__setattr__(self, "x0_feedback", np.atleast_1d(np.asarray(self.x0_feedback, dtype=float)))
        if self.law == "potential_shaping" and self.V_d_gradient is None:
            raise ValueError("potential_shaping needs V_d_gradient")
        if self.law == "general_hamiltonian":
            if self.target is None or self.target.kind != HAMILTONIAN_B_D:
                raise ValueError("general_hamiltonian needs a momentum-space target")
        if self.law == "lagrangian_general":
            if self.target is None or self.target.kind != LAGRANGIAN_F_D:
                raise ValueError("lagrangian_general needs a velocity-space target")
        if self.law == "pd_gravity" and (self.K is None or self.D is None or self.q_d is None):
            raise ValueError("pd_gravity needs K, D and q_d")
        if self.law == "computed_torque" and (self.M_d is None or self.K is None
                                              or self.D is None or self.reference is None):
            raise ValueError("computed_torque needs M_d, K, D and a reference")


# ---------------------------------------------------------------------------
# Stage solvers


def _stage_guess_full(model, target, q_k, p_k, h, t_mid):
    qh = q_k + 0.5 * h * model.solve_mass(q_k, p_k)
    ph = p_k + 0.5 * h * np.asarray(target.rhs(q_k, p_k, t_mid), dtype=float)
    return np.concatenate((qh, ph))


def solve_stage_hamiltonian(model: MechanicalModel,
                            target: TargetDynamics,
                            q_k: Vector,
                            p_k: Vector,
                            h: float,
                            cfg: NewtonConfig = DEFAULT_NEWTON,
                            t_k: float = 0.0,
                            guess: Optional[Vector] = None) -> tuple[Vector, Vector, StepReport]:
    """Solve the coupled midpoint stage system for (q_half, p_half)."""
    n = model.n
    q_k = np.atleast_1d(np.asarray(q_k, dtype=float))
    p_k = np.atleast_1d(np.asarray(p_k, dtype=float))
    t_mid = t_k + 0.5 * h
    half_h = 0.5 * h

    def residual(z):
        qh, ph = z[:n], z[n:]
        r1 = model.mass_matrix(qh) @ (qh - q_k) - half_h * ph
        r2 = ph - p_k - half_h * np.asarray(target.rhs(qh, ph, t_mid), dtype=float)
        return np.concatenate((r1, r2))

    jac = None
    if target.rhs_jacobian is not None:
        eye = np.eye(n)

        def jac(z):
            qh, ph = z[:n], z[n:]
            J = np.zeros((2 * n, 2 * n))
            top = model.mass_matrix(qh).copy()
            if not model.constant_mass:
                dq = qh - q_k
                for j in range(n):
                    top[:, j] += model.mass_matrix_qderiv(qh, eye[j]) @ dq
            J[:n, :n] = top
            J[:n, n:] = -half_h * eye
            Jq, Jp = target.rhs_jacobian(qh, ph, t_mid)
            J[n:, :n] = -half_h * Jq
            J[n:, n:] = eye - half_h * Jp
            return J

    if guess is None:
        guess = _stage_guess_full(model, target, q_k, p_k, h, t_mid)
    z, report = newton_solve(residual, guess, cfg, jacobian=jac)
    return z[:n], z[n:], report


def solve_stage_hamiltonian_position_only(model: MechanicalModel,
                                          target: TargetDynamics,
                                          q_k: Vector,
                                          ctrl_state: ControllerState,
                                          h: float,
                                          cfg: NewtonConfig = DEFAULT_NEWTON,
                                          t_k: float = 0.0,
                                          guess: Optional[Vector] = None
                                          ) -> tuple[Vector, Vector, Vector, StepReport]:
    """Stage solve with the sampled momentum reconstructed from stage values.

    Substituting p_k = M(q_k) (q_half - q_half_prev) / h into the momentum
    stage equation eliminates p_k.  The first interval uses the supplied
    initial momentum instead.  On success ``ctrl_state.q_half_prev`` is
    updated to the new stage value.
    """
    n = model.n
    q_k = np.atleast_1d(np.asarray(q_k, dtype=float))

    if ctrl_state.first_step or ctrl_state.q_half_prev is None:
        if ctrl_state.v0_or_p0 is None:
            raise ControllerError("first step requires an initial momentum")
        p0 = np.atleast_1d(np.asarray(ctrl_state.v0_or_p0, dtype=float))
        qh, ph, report = solve_stage_hamiltonian(model, target, q_k, p0, h, cfg,
                                                 t_k=t_k, guess=guess)
        if report.converged:
            ctrl_state.q_half_prev = qh.copy()
            ctrl_state.first_step = False
        return qh, ph, p0, report

    q_prev = ctrl_state.q_half_prev
    M_k = model.mass_matrix(q_k)
    t_mid = t_k + 0.5 * h
    half_h = 0.5 * h

    def residual(z):
        qh, ph = z[:n], z[n:]
        p_rec = M_k @ (qh - q_prev) / h
        r1 = model.mass_matrix(qh) @ (qh - q_k) - half_h * ph
        r2 = ph - p_rec - half_h * np.asarray(target.rhs(qh, ph, t_mid), dtype=float)
        return np.concatenate((r1, r2))

    jac = None
    if target.rhs_jacobian is not None:
        eye = np.eye(n)

        def jac(z):
            qh, ph = z[:n], z[n:]
            J = np.zeros((2 * n, 2 * n))
            top = model.mass_matrix(qh).copy()
            if not model.constant_mass:
                dq = qh - q_k
                for j in range(n):
                    top[:, j] += model.mass_matrix_qderiv(qh, eye[j]) @ dq
            J[:n, :n] = top
            J[:n, n:] = -half_h * eye
            Jq, Jp = target.rhs_jacobian(qh, ph, t_mid)
            J[n:, :n] = -M_k / h - half_h * Jq
            J[n:, n:] = eye - half_h * Jp
            return J

    if guess is None:
        qh0 = 2.0 * q_k - q_prev
        ph0 = M_k @ (qh0 - q_prev) / h
        guess = np.concatenate((qh0, ph0))
    z, report = newton_solve(residual, guess, cfg, jacobian=jac)
    qh, ph = z[:n], z[n:]
    p_k = M_k @ (qh - q_prev) / h
    if report.converged:
        ctrl_state.q_half_prev = qh.copy()
    return qh, ph, p_k, report


def solve_stage_lagrangian(model: MechanicalModel,
                           f_d: TargetDynamics,
                           q_k: Vector,
                           ctrl_state: Optional[ControllerState],
                           h: float,
                           cfg: NewtonConfig = DEFAULT_NEWTON,
                           t_k: float = 0.0,
                           v_k: Optional[Vector] = None,
                           guess: Optional[Vector] = None
                           ) -> tuple[Vector, Vector, Vector, StepReport]:
    """Velocity-space stage solve; returns (q_half, v_half, v_k, report).

    With ``v_k`` given the measured velocity is used (full-state feedback);
    otherwise it is reconstructed as (q_half - q_half_prev) / h from
    ``ctrl_state``, whose first interval falls back to the stored initial
    velocity.  The identity v_half = 2 (q_half - q_k) / h holds for every
    solved step.
    """
    n = model.n
    q_k = np.atleast_1d(np.asarray(q_k, dtype=float))
    t_mid = t_k + 0.5 * h
    half_h = 0.5 * h

    reconstruct = v_k is None
    q_prev = None
    if reconstruct:
        if ctrl_state is None:
            raise ControllerError("position-only solve needs controller state")
        if ctrl_state.first_step or ctrl_state.q_half_prev is None:
            if ctrl_state.v0_or_p0 is None:
                raise ControllerError("first step requires an initial velocity")
            v_k = np.atleast_1d(np.asarray(ctrl_state.v0_or_p0, dtype=float))
            reconstruct = False
            first = True
        else:
            q_prev = ctrl_state.q_half_prev
            first = False
    else:
        v_k = np.atleast_1d(np.asarray(v_k, dtype=float))
        first = False

    def residual(z):
        qh, vh = z[:n], z[n:]
        v_eff = (qh - q_prev) / h if reconstruct else v_k
        r1 = qh - q_k - half_h * vh
        r2 = vh - v_eff - half_h * np.asarray(f_d.rhs(qh, vh, t_mid), dtype=float)
        return np.concatenate((r1, r2))

    jac = None
    if f_d.rhs_jacobian is not None:
        eye = np.eye(n)

        def jac(z):
            qh, vh = z[:n], z[n:]
            J = np.zeros((2 * n, 2 * n))
            J[:n, :n] = eye
            J[:n, n:] = -half_h * eye
            Jq, Jv = f_d.rhs_jacobian(qh, vh, t_mid)
            J[n:, :n] = -half_h * Jq - (eye / h if reconstruct else 0.0)
            J[n:, n:] = eye - half_h * Jv
            return J

    if guess is None:
        if reconstruct:
            qh0 = 2.0 * q_k - q_prev
            vh0 = 2.0 * (qh0 - q_k) / h
        else:
            vh0 = v_k + half_h * np.asarray(f_d.rhs(q_k, v_k, t_mid), dtype=float)
            qh0 = q_k + half_h * vh0
        guess = np.concatenate((qh0, vh0))
    z, report = newton_solve(residual, guess, cfg, jacobian=jac)
    qh, vh = z[:n], z[n:]
    v_used = (qh - q_prev) / h if reconstruct else v_k
    if report.converged and ctrl_state is not None:
        ctrl_state.q_half_prev = qh.copy()
        if first:
            ctrl_state.first_step = False
    return qh, vh, v_used, report


# ---------------------------------------------------------------------------
# Control laws


def control_potential_shaping(model: MechanicalModel,
                              V_d_gradient: Callable[[Vector], Vector],
                              stages: tuple[Vector, Vector]) -> Vector:
    """Replace the open-loop potential force with the shaped one."""
    q_half = stages[0]
    return model.potential_gradient(q_half) - np.asarray(V_d_gradient(q_half), dtype=float)


def control_general_hamiltonian(model: MechanicalModel,
                                target: TargetDynamics,
                                stages: tuple[Vector, Vector],
                                t_half: float = 0.0) -> Vector:
    """Cancel the open-loop momentum drift and impose the target one."""
    q_half, p_half = stages
    return hamiltonian_q_gradient(model, q_half, p_half) \
        + np.asarray(target.rhs(q_half, p_half, t_half), dtype=float)


def control_lagrangian(model: MechanicalModel,
                       f: Callable[[Vector, Vector], Vector],
                       f_d: TargetDynamics,
                       stages: tuple[Vector, Vector],
                       t_half: float = 0.0) -> Vector:
    """u = M(q_half) (f_d(stages, t) - f(stages)) in velocity space."""
    q_half, v_half = stages
    return model.mass_matrix(q_half) @ (
        np.asarray(f_d.rhs(q_half, v_half, t_half), dtype=float) - np.asarray(f(q_half, v_half), dtype=float))


def control_pd_gravity(variant: str,
                       model: MechanicalModel,
                       K: Matrix, D: Matrix,
                       q_d: Vector,
                       q: Vector,
                       velocity: Vector) -> Vector:
    """Gravity compensation plus proportional-derivative feedback.

    The symplectic variant is evaluated at stage values, the
    quasi-continuous one at sampled values; the formula is identical.
    """
    if variant not in MODES:
        raise ValueError(f"unknown variant {variant!r}")
    return model.potential_gradient(q) - D @ velocity - K @ (q - q_d)


def control_computed_torque(variant: str,
                            model: MechanicalModel,
                            M_d: Matrix, K: Matrix, D: Matrix,
                            reference: Callable[[float], tuple],
                            q: Vector, v: Vector, t: float) -> Vector:
    """Feedback linearisation with shaped linear error dynamics.

    Cancels Coriolis and potential forces, feeds the reference acceleration
    forward and imposes M_d e'' + D e' + K e = 0 on the tracking error.
    """
    if variant not in MODES:
        raise ValueError(f"unknown variant {variant!r}")
    q_ref, v_ref, a_ref = reference(t)
    e = q - q_ref
    e_dot = v - v_ref
    return model.coriolis(q, v) @ v + model.potential_gradient(q) \
        + model.mass_matrix(q) @ (a_ref + np.linalg.solve(M_d, -K @ e - D @ e_dot))


def control_quasi_continuous_hamiltonian(model: MechanicalModel,
                                         target: TargetDynamics,
                                         q_k: Vector, p_k: Vector,
                                         t_k: float = 0.0) -> Vector:
    """The continuous-time law evaluated at the sampled state and held."""
    return hamiltonian_q_gradient(model, q_k, p_k) \
        + np.asarray(target.rhs(q_k, p_k, t_k), dtype=float)


# ---------------------------------------------------------------------------
# Target builders for the shipped experiments


def potential_shaping_target(model: MechanicalModel,
                             V_d_gradient: Callable[[Vector], Vector],
                             V_d_hessian: Optional[Callable[[Vector], Matrix]] = None) -> TargetDynamics:
    """Conservative target with shaped potential and unchanged inertia."""

    def b_d(q, p, t=0.0):
        return -(np.asarray(V_d_gradient(q), dtype=float) + kinetic_q_gradient(model, q, p))

    jac = None
    if V_d_hessian is not None and model.constant_mass:
        zero = np.zeros((model.n, model.n))

        def jac(q, p, t=0.0):
            return -np.asarray(V_d_hessian(q), dtype=float), zero

    return TargetDynamics(kind=HAMILTONIAN_B_D, rhs=b_d, time_varying=False, rhs_jacobian=jac)


def linear_impedance_target(m: float, c: float, d: float) -> TargetDynamics:
    """Scalar spring-damper target: dp/dt = -c q - (d/m) p."""
    Jq = np.array([[-c]])
    Jp = np.array([[-d / m]])

    def b_d(q, p, t=0.0):
        return -c * q - (d / m) * p

    return TargetDynamics(kind=HAMILTONIAN_B_D, rhs=b_d, time_varying=False,
                          rhs_jacobian=lambda q, p, t=0.0: (Jq, Jp))


def pd_hamiltonian_target(model: MechanicalModel, K: Matrix, D: Matrix,
                          q_d: Vector) -> TargetDynamics:
    """Momentum-space target of PD control with gravity compensation."""
    K = np.asarray(K, dtype=float)
    D = np.asarray(D, dtype=float)
    q_d = np.asarray(q_d, dtype=float)

    def b_d(q, p, t=0.0):
        return -(K @ (q - q_d)) - kinetic_q_gradient(model, q, p) - D @ model.solve_mass(q, p)

    return TargetDynamics(kind=HAMILTONIAN_B_D, rhs=b_d, time_varying=False)


def pd_lagrangian_target(model: MechanicalModel, K: Matrix, D: Matrix,
                         q_d: Vector) -> TargetDynamics:
    """Velocity-space target of PD control with gravity compensation."""
    K = np.asarray(K, dtype=float)
    D = np.asarray(D, dtype=float)
    q_d = np.asarray(q_d, dtype=float)

    def f_d(q, v, t=0.0):
        rhs = (model.coriolis(q, v) + D) @ v + K @ (q - q_d)
        return -model.solve_mass(q, rhs)

    return TargetDynamics(kind=LAGRANGIAN_F_D, rhs=f_d, time_varying=False)


def computed_torque_target(M_d: Matrix, K: Matrix, D: Matrix,
                           reference: Callable[[float], tuple]) -> TargetDynamics:
    """Time-varying tracking target with linear shaped error dynamics."""
    M_d = np.asarray(M_d, dtype=float)
    Jq = -np.linalg.solve(M_d, np.asarray(K, dtype=float))
    Jv = -np.linalg.solve(M_d, np.asarray(D, dtype=float))

    def f_d(q, v, t):
        q_ref, v_ref, a_ref = reference(t)
        return a_ref + Jq @ (q - q_ref) + Jv @ (v - v_ref)

    return TargetDynamics(kind=LAGRANGIAN_F_D, rhs=f_d, time_varying=True,
                          rhs_jacobian=lambda q, v, t: (Jq, Jv))


# ---------------------------------------------------------------------------
# Stateful per-loop controllers


@dataclass
class StepOutput:
    u: Vector
    q_half: Optional[Vector]
    x_half: Optional[Vector]
    iterations: int
    residual: float
    solve_seconds: float


class SymplecticHamiltonianController:
    """Implicit momentum-space law with optional position-only feedback."""

    stage_kind = "momentum"

    def __init__(self, model, target, u_fn, feedback, h, newton=DEFAULT_NEWTON, p0=None):
        self.model = model
        self.target = target
        self.u_fn = u_fn
        self.feedback = feedback
        self.h = h
        self.newton = newton
        p0 = np.zeros(model.n) if p0 is None else np.asarray(p0, dtype=float)
        self.state = ControllerState(q_half_prev=None, v0_or_p0=p0)
        self._prev_stage = None
        self.measurement = "position" if feedback == "position_only" else "momentum"

    def step(self, q, x, t) -> StepOutput:
        start = time.perf_counter()
        if self.feedback == "position_only":
            qh, ph, _, report = solve_stage_hamiltonian_position_only(
                self.model, self.target, q, self.state, self.h, self.newton,
                t_k=t, guess=self._prev_stage)
        else:
            qh, ph, report = solve_stage_hamiltonian(
                self.model, self.target, q, x, self.h, self.newton,
                t_k=t, guess=self._prev_stage)
        elapsed = time.perf_counter() - start
        if not report.converged:
            raise ControllerError(
                f"stage solve failed at t={t:.6g} (residual {report.final_residual:.3e})", report)
        self._prev_stage = np.concatenate((qh, ph))
        u = self.u_fn(qh, ph, t + 0.5 * self.h)
        return StepOutput(u, qh, ph, report.iterations, report.final_residual, elapsed)


class SymplecticLagrangianController:
    """Implicit velocity-space law with optional position-only feedback."""

    stage_kind = "velocity"

    def __init__(self, model, f_d, u_fn, feedback, h, newton=DEFAULT_NEWTON, v0=None):
        self.model = model
        self.f_d = f_d
        self.u_fn = u_fn
        self.feedback = feedback
        self.h = h
        self.newton = newton
        v0 = np.zeros(model.n) if v0 is None else np.asarray(v0, dtype=float)
        self.state = ControllerState(q_half_prev=None, v0_or_p0=v0)
        self._prev_stage = None
        self.measurement = "position" if feedback == "position_only" else "velocity"

    def step(self, q, x, t) -> StepOutput:
        start = time.perf_counter()
        v_k = None if self.feedback == "position_only" else x
        qh, vh, _, report = solve_stage_lagrangian(
            self.model, self.f_d, q, self.state, self.h, self.newton,
            t_k=t, v_k=v_k, guess=self._prev_stage)
        elapsed = time.perf_counter() - start
        if not report.converged:
            raise ControllerError(
                f"stage solve failed at t={t:.6g} (residual {report.final_residual:.3e})", report)
        self._prev_stage = np.concatenate((qh, vh))
        u = self.u_fn(qh, vh, t + 0.5 * self.h)
        return StepOutput(u, qh, vh, report.iterations, report.final_residual, elapsed)


class QuasiContinuousController:
    """Continuous-time law sampled and held; optional backward-difference velocity."""

    stage_kind = None

    def __init__(self, model, law_fn, needs, feedback, h, x0=None):
        # needs: which sampled quantity the law consumes ("momentum"/"velocity"/None)
        self.model = model
        self.law_fn = law_fn
        self.needs = needs
        self.feedback = feedback
        self.h = h
        self._q_prev = None
        self._x0 = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
        if needs is None:
            self.measurement = "position"
        else:
            self.measurement = "position" if feedback == "position_only" else needs

    def step(self, q, x, t) -> StepOutput:
        if self.needs is not None and self.feedback == "position_only":
            v_hat = self._x0 if self._q_prev is None else (q - self._q_prev) / self.h
            self._q_prev = q.copy()
            x = self.model.mass_matrix(q) @ v_hat if self.needs == "momentum" else v_hat
        u = self.law_fn(q, x, t)
        return StepOutput(u, None, None, 0, 0.0, 0.0)


def make_controller(model: MechanicalModel, spec: ControllerSpec, h: float,
                    newton: NewtonConfig = DEFAULT_NEWTON):
    """Instantiate the stateful controller described by ``spec``."""
    if spec.n != model.n:
        raise ValueError("spec dimension does not match the model")

    if spec.law == "potential_shaping":
        target = potential_shaping_target(model, spec.V_d_gradient)
        if spec.mode == "symplectic":
            u_fn = lambda qh, ph, t: control_potential_shaping(model, spec.V_d_gradient, (qh, ph))
            return SymplecticHamiltonianController(model, target, u_fn, spec.feedback,
                                                   h, newton, p0=spec.x0_feedback)
        law = lambda q, x, t: model.potential_gradient(q) - np.asarray(spec.V_d_gradient(q), dtype=float)
        return QuasiContinuousController(model, law, None, spec.feedback, h)

    if spec.law == "general_hamiltonian":
        target = spec.target
        if spec.mode == "symplectic":
            u_fn = lambda qh, ph, t: control_general_hamiltonian(model, target, (qh, ph), t)
            return SymplecticHamiltonianController(model, target, u_fn, spec.feedback,
                                                   h, newton, p0=spec.x0_feedback)
        law = lambda q, p, t: control_quasi_continuous_hamiltonian(model, target, q, p, t)
        return QuasiContinuousController(model, law, "momentum", spec.feedback, h, x0=spec.x0_feedback)

    if spec.law == "pd_gravity":
        if spec.mode == "symplectic":
            target = pd_hamiltonian_target(model, spec.K, spec.D, spec.q_d)

            def u_fn(qh, ph, t):
                return control_pd_gravity("symplectic", model, spec.K, spec.D, spec.q_d,
                                          qh, model.solve_mass(qh, ph))

            return SymplecticHamiltonianController(model, target, u_fn, spec.feedback,
                                                   h, newton, p0=spec.x0_feedback)

        def law(q, v, t):
            return control_pd_gravity("quasi_continuous", model, spec.K, spec.D, spec.q_d, q, v)

        return QuasiContinuousController(model, law, "velocity", spec.feedback, h, x0=spec.x0_feedback)

    if spec.law == "computed_torque":
        if spec.mode == "symplectic":
            f_d = computed_torque_target(spec.M_d, spec.K, spec.D, spec.reference)

            def u_fn(qh, vh, t):
                return control_computed_torque("symplectic", model, spec.M_d, spec.K,
                                               spec.D, spec.reference, qh, vh, t)

            return SymplecticLagrangianController(model, f_d, u_fn, spec.feedback,
                                                  h, newton, v0=spec.x0_feedback)

        def law(q, v, t):
            return control_computed_torque("quasi_continuous", model, spec.M_d, spec.K,
                                           spec.D, spec.reference, q, v, t)

        return QuasiContinuousController(model, law, "velocity", spec.feedback, h, x0=spec.x0_feedback)

    # lagrangian_general
    f_d = spec.target
    drift = lagrangian_drift(model)
    if spec.mode == "symplectic":
        u_fn = lambda qh, vh, t: control_lagrangian(model, drift, f_d, (qh, vh), t)
        return SymplecticLagrangianController(model, f_d, u_fn, spec.feedback,
                                              h, newton, v0=spec.x0_feedback)

    def law(q, v, t):
        return model.mass_matrix(q) @ (np.asarray(f_d.rhs(q, v, t), dtype=float)
                                       - np.asarray(drift(q, v), dtype=float))

    return QuasiContinuousController(model, law, "velocity", spec.feedback, h, x0=spec.x0_feedback)
