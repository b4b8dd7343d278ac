"""Mechanical-system descriptions and shaped target dynamics.

A system is described by its configuration-dependent mass matrix M(q), its
potential V(q) with analytic gradient, and a Coriolis matrix C(q, v) that is
compatible with M in the sense that dM/dt - 2C is skew-symmetric.  The
Hamiltonian H(q, p) = 1/2 p^T M(q)^{-1} p + V(q) and the Legendre transform
p = M(q) v connect the momentum and velocity pictures.

Controllers in this package do not modify the coordinate equation; they shape
the momentum (or velocity) right-hand side.  ``TargetDynamics`` captures such
a shaped right-hand side, and :func:`build_ida_pbc_target` assembles it from
a shaped inertia matrix, a shaped potential gradient, gyroscopic terms and a
damping matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

Vector = np.ndarray
Matrix = np.ndarray

HAMILTONIAN_B_D = "hamiltonian_b_d"
LAGRANGIAN_F_D = "lagrangian_f_d"

_EYE_CACHE: dict[int, np.ndarray] = {}


def _eye(n: int) -> np.ndarray:
    if n not in _EYE_CACHE:
        _EYE_CACHE[n] = np.eye(n)
    return _EYE_CACHE[n]


def _as_vector(x, n: int, name: str) -> Vector:
    v = np.asarray(x, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {v.shape}")
    return v


@dataclass(frozen=True)
class MechanicalModel:
    """Fully actuated mechanical system with n degrees of freedom.

    All callables are pure functions of their arguments; instances are
    immutable and safe to share between threads.

    Attributes:
        n: number of degrees of freedom.
        mass_matrix: q -> symmetric positive definite (n, n) matrix.
        potential: q -> potential energy (scalar).
        potential_gradient: q -> gradient of the potential, shape (n,).
        mass_matrix_qderiv: (q, w) -> directional derivative of the mass
            matrix along w, i.e. sum_i dM/dq_i * w_i.  Used for the kinetic
            part of the Hamiltonian gradient and the Coriolis construction.
        coriolis: (q, v) -> (n, n) Coriolis matrix.
        mass_matrix_inverse: optional q -> M(q)^{-1}; a fast analytic inverse
            for the small systems handled here.  Falls back to an LU solve.
        constant_mass: True when M does not depend on q; lets hot loops skip
            the kinetic gradient entirely.
    """

    n: int
    mass_matrix: Callable[[Vector], Matrix]
    potential: Callable[[Vector], float]
    potential_gradient: Callable[[Vector], Vector]
    mass_matrix_qderiv: Callable[[Vector, Vector], Matrix]
    coriolis: Callable[[Vector, Vector], Matrix]
    mass_matrix_inverse: Optional[Callable[[Vector], Matrix]] = None
    constant_mass: bool = False

    def solve_mass(self, q: Vector, rhs: Vector) -> Vector:
        """Return M(q)^{-1} rhs."""
        if self.mass_matrix_inverse is not None:
            return self.mass_matrix_inverse(q) @ rhs
        return np.linalg.solve(self.mass_matrix(q), rhs)

    def inverse_mass(self, q: Vector) -> Matrix:
        if self.mass_matrix_inverse is not None:
            return self.mass_matrix_inverse(q)
        return np.linalg.inv(self.mass_matrix(q))


@dataclass(frozen=True)
class HamiltonianState:
    """Configuration q, momentum p and time t of a mechanical system."""

    q: Vector
    p: Vector
    t: float = 0.0

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if q.shape != p.shape:
            raise ValueError(f"q and p must match, got {q.shape} vs {p.shape}")
        if not (np.isfinite(q).all() and np.isfinite(p).all() and np.isfinite(self.t)):
            raise ValueError("state entries must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "t", float(self.t))


@dataclass(frozen=True)
class LagrangianState:
    """Configuration q, velocity v and time t of a mechanical system."""

    q: Vector
    v: Vector
    t: float = 0.0

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if q.shape != v.shape:
            raise ValueError(f"q and v must match, got {q.shape} vs {v.shape}")
        if not (np.isfinite(q).all() and np.isfinite(v).all() and np.isfinite(self.t)):
            raise ValueError("state entries must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "t", float(self.t))


@dataclass(frozen=True)
class TargetDynamics:
    """Desired momentum/velocity right-hand side imposed by feedback.

    ``rhs(q, x, t)`` returns the shaped time derivative of the momentum
    (``kind == HAMILTONIAN_B_D``, x is p) or of the velocity
    (``kind == LAGRANGIAN_F_D``, x is v).  ``rhs_jacobian`` optionally
    returns the pair (d rhs/d q, d rhs/d x) for fast Newton iterations;
    when absent the solvers fall back to finite differences.
    """

    kind: str
    rhs: Callable[[Vector, Vector, float], Vector]
    time_varying: bool = False
    rhs_jacobian: Optional[Callable[[Vector, Vector, float], tuple[Matrix, Matrix]]] = None

    def __post_init__(self):
        if self.kind not in (HAMILTONIAN_B_D, LAGRANGIAN_F_D):
            raise ValueError(f"unknown target kind {self.kind!r}")


def check_model(model: MechanicalModel, q: Vector, v: Vector,
                rel_tol: float = 1e-12, skew_tol: float = 1e-10) -> None:
    """Validate the structural properties of a model at one state.

    Checks symmetry and positive definiteness of M(q), and the
    skew-symmetry of dM/dt - 2 C(q, v).  Raises ``AssertionError``.
    """
    M = model.mass_matrix(q)
    scale = max(1.0, float(np.abs(M).max()))
    assert np.abs(M - M.T).max() <= rel_tol * scale, "mass matrix not symmetric"
    assert np.linalg.eigvalsh(M).min() > 0.0, "mass matrix not positive definite"
    Mdot = model.mass_matrix_qderiv(q, v)
    S = Mdot - 2.0 * model.coriolis(q, v)
    assert np.abs(S + S.T).max() <= skew_tol, "dM/dt - 2C is not skew-symmetric"


def hamiltonian(model: MechanicalModel, state: HamiltonianState) -> float:
    """Total energy 1/2 p^T M(q)^{-1} p + V(q)."""
    q = _as_vector(state.q, model.n, "q")
    p = _as_vector(state.p, model.n, "p")
    return 0.5 * float(p @ model.solve_mass(q, p)) + float(model.potential(q))


def kinetic_q_gradient(model: MechanicalModel, q: Vector, p: Vector) -> Vector:
    """Gradient of the kinetic energy 1/2 p^T M(q)^{-1} p with respect to q.

    Component i is -1/2 p^T M^{-1} (dM/dq_i) M^{-1} p, which avoids
    differentiating an explicit inverse.
    """
    if model.constant_mass:
        return np.zeros(model.n)
    w = model.solve_mass(q, p)
    g = np.empty(model.n)
    eye = _eye(model.n)
    for i in range(model.n):
        g[i] = -0.5 * float(w @ model.mass_matrix_qderiv(q, eye[i]) @ w)
    return g


def hamiltonian_q_gradient(model: MechanicalModel, q: Vector, p: Vector) -> Vector:
    """Gradient of H with respect to q (potential plus kinetic part)."""
    q = _as_vector(q, model.n, "q")
    p = _as_vector(p, model.n, "p")
    if model.constant_mass:
        return np.asarray(model.potential_gradient(q), dtype=float)
    return model.potential_gradient(q) + kinetic_q_gradient(model, q, p)


def legendre_to_hamiltonian(model: MechanicalModel, state: LagrangianState) -> HamiltonianState:
    """Map (q, v) to (q, p) via p = M(q) v."""
    q = _as_vector(state.q, model.n, "q")
    return HamiltonianState(q=q, p=model.mass_matrix(q) @ state.v, t=state.t)


def legendre_to_lagrangian(model: MechanicalModel, state: HamiltonianState) -> LagrangianState:
    """Map (q, p) to (q, v) via v = M(q)^{-1} p."""
    q = _as_vector(state.q, model.n, "q")
    return LagrangianState(q=q, v=model.solve_mass(q, state.p), t=state.t)


def christoffel_coriolis(model_qderiv: Callable[[Vector, Vector], Matrix],
                         n: int, q: Vector, v: Vector) -> Matrix:
    """Coriolis matrix from Christoffel symbols of the first kind.

    C_ij = 1/2 sum_k (dM_ij/dq_k + dM_ik/dq_j - dM_jk/dq_i) v_k.  This is the
    canonical choice making dM/dt - 2C skew-symmetric.
    """
    eye = _eye(n)
    A = np.stack([model_qderiv(q, eye[k]) for k in range(n)])  # A[k, i, j] = dM_ij/dq_k
    t1 = np.einsum("kij,k->ij", A, v)
    t2 = np.einsum("jik,k->ij", A, v)
    t3 = np.einsum("ijk,k->ij", A, v)
    return 0.5 * (t1 + t2 - t3)


def lagrangian_drift(model: MechanicalModel) -> Callable[[Vector, Vector], Vector]:
    """Open-loop acceleration f(q, v) = -M^{-1} (C(q, v) v + grad V(q))."""

    def f(q: Vector, v: Vector) -> Vector:
        rhs = model.potential_gradient(q).copy()
        if not model.constant_mass:
            rhs = rhs + model.coriolis(q, v) @ v
        return -model.solve_mass(q, rhs)

    return f


def build_ida_pbc_target(model: MechanicalModel,
                         M_d=None,
                         V_d_gradient: Callable[[Vector], Vector] = None,
                         J2: Optional[Callable[[Vector, Vector], Matrix]] = None,
                         R2=None,
                         M_d_qderiv: Optional[Callable[[Vector, Vector], Matrix]] = None,
                         check_structure: bool = False) -> TargetDynamics:
    """Momentum right-hand side of an interconnection/damping-assigned target.

    The shaped energy is H_d(q, p) = 1/2 p^T M_d(q)^{-1} p + V_d(q) and the
    assembled right-hand side is

        b_d(q, p) = -M_d M^{-1} grad_q H_d(q, p) + (J2 - R2) M_d^{-1} p.

    Args:
        model: the open-loop system (provides M and its derivative).
        M_d: shaped inertia; ``None`` keeps the open-loop inertia, a constant
            array freezes it, a callable must come with ``M_d_qderiv``.
        V_d_gradient: gradient of the shaped potential.
        J2: optional gyroscopic term, (q, p) -> skew-symmetric matrix.
        R2: optional damping, constant array or (q, p) -> PSD matrix.
        check_structure: probe J2/R2 for skewness/symmetry-PSD at a few
            sampled states and raise on violation.
    """
    n = model.n
    if V_d_gradient is None:
        raise ValueError("V_d_gradient is required")

    if M_d is None:
        md_fn = model.mass_matrix
        md_deriv = None if model.constant_mass else model.mass_matrix_qderiv
        md_solve = model.solve_mass
    elif callable(M_d):
        if M_d_qderiv is None:
            raise ValueError("a configuration-dependent M_d needs M_d_qderiv")
        md_fn = M_d
        md_deriv = M_d_qderiv
        md_solve = lambda q, rhs: np.linalg.solve(md_fn(q), rhs)
    else:
        md_const = np.atleast_2d(np.asarray(M_d, dtype=float))
        if md_const.shape != (n, n):
            raise ValueError(f"M_d must be ({n}, {n})")
        md_fn = lambda q: md_const
        md_deriv = None
        md_solve = lambda q, rhs: np.linalg.solve(md_const, rhs)

    if R2 is not None and not callable(R2):
        r2_const = np.atleast_2d(np.asarray(R2, dtype=float))
        R2 = lambda q, p, _R=r2_const: _R

    if check_structure:
        rng = np.random.default_rng(0)
        for _ in range(5):
            q = rng.standard_normal(n)
            p = rng.standard_normal(n)
            if J2 is not None:
                j = J2(q, p)
                if np.abs(j + j.T).max() > 1e-10:
                    raise ValueError("J2 is not skew-symmetric")
            if R2 is not None:
                r = R2(q, p)
                if np.abs(r - r.T).max() > 1e-10 or np.linalg.eigvalsh(r).min() < -1e-10:
                    raise ValueError("R2 is not symmetric positive semidefinite")

    eye = _eye(n)

    def shaped_q_gradient(q: Vector, p: Vector) -> Vector:
        g = np.asarray(V_d_gradient(q), dtype=float)
        if md_deriv is not None:
            w = md_solve(q, p)
            kin = np.empty(n)
            for i in range(n):
                kin[i] = -0.5 * float(w @ md_deriv(q, eye[i]) @ w)
            g = g + kin
        return g

    def b_d(q: Vector, p: Vector, t: float = 0.0) -> Vector:
        out = -(md_fn(q) @ model.solve_mass(q, shaped_q_gradient(q, p)))
        if J2 is not None or R2 is not None:
            w = md_solve(q, p)
            if J2 is not None:
                out = out + J2(q, p) @ w
            if R2 is not None:
                out = out - R2(q, p) @ w
        return out

    return TargetDynamics(kind=HAMILTONIAN_B_D, rhs=b_d, time_varying=False)
