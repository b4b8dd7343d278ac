"""Time stepping: damped Newton, implicit midpoint, Stormer-Verlet, and an
embedded adaptive Runge-Kutta pair for the continuous plant.

The implicit midpoint rule advances x_{k+1} = x_k + h f((x_k + x_{k+1})/2)
and is symplectic of order 2.  The stage value is obtained from a half-step
implicit Euler solve.  The Stormer-Verlet scheme is provided in its two-step
position form, in the one-step staggered-grid form, and in a generalised
partitioned form for right-hand sides a(q, p), b(q, p).

The plant propagator emulates a continuous plant under zero-order hold with
a Bogacki-Shampine style embedded 2(3) pair at a configurable tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import HamiltonianState, MechanicalModel, hamiltonian_q_gradient

Vector = np.ndarray
Matrix = np.ndarray


class ConvergenceError(RuntimeError):
    """An implicit solve failed to reach the requested residual norm."""


class StepUnderflowError(RuntimeError):
    """Adaptive step size fell below the minimum allowed fraction of the span."""


@dataclass(frozen=True)
class NewtonConfig:
    abs_tol: float = 1e-10     # infinity-norm residual threshold
    max_iter: int = 50
    damping: float = 0.5       # line-search shrink factor
    max_halvings: int = 20
    fd_step: float = 1e-7      # forward-difference Jacobian step scale

    def __post_init__(self):
        if self.abs_tol <= 0:
            raise ValueError("abs_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not (0.0 < self.damping < 1.0):
            raise ValueError("damping must lie in (0, 1)")


@dataclass(frozen=True)
class StepReport:
    iterations: int
    final_residual: float
    converged: bool


DEFAULT_NEWTON = NewtonConfig()


def _fd_jacobian(residual, x: Vector, r0: Vector, scale: float) -> Matrix:
    m = x.size
    J = np.empty((m, m))
    for j in range(m):
        step = scale * max(1.0, abs(x[j]))
        xp = x.copy()
        xp[j] += step
        J[:, j] = (np.asarray(residual(xp), dtype=float) - r0) / step
    return J


def newton_solve(residual: Callable[[Vector], Vector],
                 x0: Vector,
                 cfg: NewtonConfig = DEFAULT_NEWTON,
                 jacobian: Optional[Callable[[Vector], Matrix]] = None) -> tuple[Vector, StepReport]:
    """Damped Newton iteration for residual(x) = 0.

    Returns the final iterate together with a report.  Convergence means the
    infinity norm of the residual is at most ``cfg.abs_tol``.  Without an
    analytic Jacobian a forward-difference approximation is used.  A singular
    Jacobian triggers a least-squares pseudo-step; if no residual decrease
    can be found within the line search the iteration stops unconverged.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    r = np.atleast_1d(np.asarray(residual(x), dtype=float))
    if not np.isfinite(r).all():
        raise ValueError("residual is not finite at the initial guess")
    norm = float(np.abs(r).max())
    updates = 0
    while updates < cfg.max_iter:
        if norm <= cfg.abs_tol:
            return x, StepReport(updates, norm, True)
        J = jacobian(x) if jacobian is not None else _fd_jacobian(residual, x, r, cfg.fd_step)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        if not np.isfinite(dx).all():
            return x, StepReport(updates, norm, False)
        step = 1.0
        for _ in range(cfg.max_halvings + 1):
            x_try = x + step * dx
            r_try = np.atleast_1d(np.asarray(residual(x_try), dtype=float))
            norm_try = float(np.abs(r_try).max()) if np.isfinite(r_try).all() else np.inf
            if norm_try < norm or norm_try <= cfg.abs_tol:
                break
            step *= cfg.damping
        else:
            return x, StepReport(updates, norm, False)
        x, r, norm = x_try, r_try, norm_try
        updates += 1
    return x, StepReport(updates, norm, norm <= cfg.abs_tol)


def implicit_midpoint_step(rhs: Callable[[Vector, float], Vector],
                           x_k: Vector,
                           t_k: float,
                           h: float,
                           cfg: NewtonConfig = DEFAULT_NEWTON,
                           rhs_jacobian: Optional[Callable[[Vector, float], Matrix]] = None,
                           stage_guess: Optional[Vector] = None) -> tuple[Vector, StepReport]:
    """One implicit-midpoint step x_{k+1} = x_k + h rhs(stage, t_k + h/2).

    The stage value solves the half implicit Euler step
    stage = x_k + (h/2) rhs(stage, t_mid); the update is 2 stage - x_k.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x_k = np.atleast_1d(np.asarray(x_k, dtype=float))
    t_mid = t_k + 0.5 * h

    def residual(s):
        return s - x_k - 0.5 * h * np.asarray(rhs(s, t_mid), dtype=float)

    jac = None
    if rhs_jacobian is not None:
        eye = np.eye(x_k.size)
        jac = lambda s: eye - 0.5 * h * rhs_jacobian(s, t_mid)

    if stage_guess is None:
        stage_guess = x_k + 0.5 * h * np.asarray(rhs(x_k, t_k), dtype=float)
    stage, report = newton_solve(residual, stage_guess, cfg, jacobian=jac)
    return 2.0 * stage - x_k, report


def stormer_verlet_two_step(f: Callable[[Vector], Vector],
                            q_k: Vector, q_km1: Vector, h: float) -> Vector:
    """Two-step position recursion q_{k+1} = 2 q_k - q_{k-1} + h^2 f(q_k)."""
    return 2.0 * np.asarray(q_k, dtype=float) - np.asarray(q_km1, dtype=float) \
        + h * h * np.asarray(f(q_k), dtype=float)


def stormer_verlet_one_step(f: Callable[[Vector], Vector],
                            q_k: Vector, v_half: Vector, h: float) -> tuple[Vector, Vector]:
    """Staggered-grid form: kick the mid-grid velocity, then drift the position.

    Two consecutive applications reproduce the two-step recursion exactly.
    """
    v_next = np.asarray(v_half, dtype=float) + h * np.asarray(f(q_k), dtype=float)
    q_next = np.asarray(q_k, dtype=float) + h * v_next
    return q_next, v_next


def stormer_verlet_partitioned_step(a: Callable[[Vector, Vector], Vector],
                                    b_d: Callable[[Vector, Vector], Vector],
                                    q_half_prev: Vector,
                                    p_k: Vector,
                                    h: float,
                                    cfg: NewtonConfig = DEFAULT_NEWTON) -> tuple[Vector, Vector]:
    """Generalised Stormer-Verlet step for dq/dt = a(q, p), dp/dt = b_d(q, p).

    Positions live on the half grid, momenta on the integer grid:

        q_{k+1/2} = q_{k-1/2} + h/2 (a(q_{k-1/2}, p_k) + a(q_{k+1/2}, p_k))
        p_{k+1}   = p_k + h/2 (b_d(q_{k+1/2}, p_k) + b_d(q_{k+1/2}, p_{k+1}))

    Each substep is solved by Newton iteration; failures raise.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    q_prev = np.atleast_1d(np.asarray(q_half_prev, dtype=float))
    p_k = np.atleast_1d(np.asarray(p_k, dtype=float))
    a_prev = np.asarray(a(q_prev, p_k), dtype=float)

    def res_q(qh):
        return qh - q_prev - 0.5 * h * (a_prev + np.asarray(a(qh, p_k), dtype=float))

    q_half, rep_q = newton_solve(res_q, q_prev + h * a_prev, cfg)
    if not rep_q.converged:
        raise ConvergenceError(f"position substep residual {rep_q.final_residual:.3e}")
    b_now = np.asarray(b_d(q_half, p_k), dtype=float)

    def res_p(pn):
        return pn - p_k - 0.5 * h * (b_now + np.asarray(b_d(q_half, pn), dtype=float))

    p_next, rep_p = newton_solve(res_p, p_k + h * b_now, cfg)
    if not rep_p.converged:
        raise ConvergenceError(f"momentum substep residual {rep_p.final_residual:.3e}")
    return q_half, p_next


# Bogacki-Shampine embedded 2(3) pair; the third-order result propagates and
# the final evaluation is reused as the first stage of the next step (FSAL).
_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


def integrate_adaptive(rhs: Callable[[Vector, float], Vector],
                       x0: Vector,
                       t0: float,
                       t1: float,
                       rtol: float = 1e-6,
                       atol: float = 1e-9,
                       min_step_fraction: float = 1e-14) -> Vector:
    """Integrate dx/dt = rhs(x, t) from t0 to exactly t1 adaptively."""
    span = t1 - t0
    if span <= 0:
        raise ValueError("t1 must exceed t0")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    t = 0.0  # accumulate relative to t0 to keep the end point exact
    f = np.asarray(rhs(x, t0), dtype=float)
    h = span
    min_step = min_step_fraction * span
    while span - t > 1e-15 * span:
        h = min(h, span - t)
        if h < min_step:
            raise StepUnderflowError(f"step size {h:.3e} below {min_step:.3e}")
        ta = t0 + t
        k1 = f
        k2 = np.asarray(rhs(x + (0.5 * h) * k1, ta + 0.5 * h), dtype=float)
        k3 = np.asarray(rhs(x + (0.75 * h) * k2, ta + 0.75 * h), dtype=float)
        x_new = x + h * ((2.0 / 9.0) * k1 + (1.0 / 3.0) * k2 + (4.0 / 9.0) * k3)
        k4 = np.asarray(rhs(x_new, ta + h), dtype=float)
        err = h * ((-5.0 / 72.0) * k1 + (1.0 / 12.0) * k2 + (1.0 / 9.0) * k3 - (1.0 / 8.0) * k4)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        with np.errstate(divide="ignore", invalid="ignore"):
            enorm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if np.isfinite(enorm) and enorm <= 1.0:
            t += h
            x = x_new
            f = k4
            factor = _MAX_FACTOR if enorm == 0.0 else min(_MAX_FACTOR, _SAFETY * enorm ** (-1.0 / 3.0))
        else:
            factor = _MIN_FACTOR if not np.isfinite(enorm) else max(_MIN_FACTOR, _SAFETY * enorm ** (-1.0 / 3.0))
        h *= factor
    return x


def plant_rhs(model: MechanicalModel, u: Vector) -> Callable[[Vector, float], Vector]:
    """Right-hand side of the forced mechanical system under a held input."""
    n = model.n
    u = np.asarray(u, dtype=float)

    def rhs(x, t):
        q = x[:n]
        p = x[n:]
        return np.concatenate((model.solve_mass(q, p),
                               u - hamiltonian_q_gradient(model, q, p)))

    return rhs


def propagate_plant(model: MechanicalModel,
                    state: HamiltonianState,
                    u_held: Vector,
                    h: float,
                    rtol: float = 1e-6,
                    atol: float = 1e-9) -> HamiltonianState:
    """Advance the continuous plant by one sampling interval under a held input."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.concatenate((state.q, state.p))
    x1 = integrate_adaptive(plant_rhs(model, u_held), x0, state.t, state.t + h,
                            rtol=rtol, atol=atol)
    n = model.n
    return HamiltonianState(q=x1[:n], p=x1[n:], t=state.t + h)
