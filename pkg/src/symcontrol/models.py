"""Benchmark systems: scalar mass-spring and a planar two-link arm.

The two-link arm carries a motor mass at the second joint.  Its inertia and
gravity terms reduce to five constants derived from the link masses, link
inertias, lengths and centre-of-gravity distances.  The module also provides
the arm's forward/inverse kinematics and a circular tool-centre-point
reference trajectory used by the tracking experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import MechanicalModel, christoffel_coriolis

Vector = np.ndarray


@dataclass(frozen=True)
class MassSpringParams:
    m: float = 1.0   # mass [kg]
    k: float = 0.5   # stiffness [N/m]

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("m must be positive")
        if self.k < 0:
            raise ValueError("k must be nonnegative")


@dataclass(frozen=True)
class TwoLinkParams:
    """Planar two-link arm with a motor (stator) mass at the elbow."""

    m1: float = 0.885
    m2: float = 0.885
    J1: float = 3.27e-3
    J2: float = 3.27e-3
    L1: float = 0.2
    L2: float = 0.2
    l1: float = 0.1
    l2: float = 0.1
    mM: float = 1.0
    g: float = 9.81
    c1: float = field(init=False)
    c2: float = field(init=False)
    c3: float = field(init=False)
    c4: float = field(init=False)
    c5: float = field(init=False)

    def __post_init__(self):
        for name in ("m1", "m2", "J1", "J2", "L1", "L2", "l1", "l2", "mM", "g"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        object.__setattr__(self, "c1", self.J1 + self.m1 * self.l1**2 + (self.mM + self.m2) * self.L1**2)
        object.__setattr__(self, "c2", self.J2 + self.m2 * self.l2**2)
        object.__setattr__(self, "c3", self.m2 * self.L1 * self.l2)
        object.__setattr__(self, "c4", self.m1 * self.l1 + (self.mM + self.m2) * self.L1)
        object.__setattr__(self, "c5", self.m2 * self.l2)


def mass_spring_model(params: MassSpringParams = MassSpringParams()) -> MechanicalModel:
    """One degree of freedom, constant mass, quadratic potential."""
    m, k = params.m, params.k
    M = np.array([[m]])
    Minv = np.array([[1.0 / m]])
    zero = np.zeros((1, 1))
    return MechanicalModel(
        n=1,
        mass_matrix=lambda q: M,
        potential=lambda q: 0.5 * k * q[0] ** 2,
        potential_gradient=lambda q: k * q,
        mass_matrix_qderiv=lambda q, w: zero,
        coriolis=lambda q, v: zero,
        mass_matrix_inverse=lambda q: Minv,
        constant_mass=True,
    )


def two_link_model(params: TwoLinkParams = TwoLinkParams()) -> MechanicalModel:
    c1, c2, c3, c4, c5, g = params.c1, params.c2, params.c3, params.c4, params.c5, params.g

    def mass_matrix(q):
        a = c3 * math.cos(q[1])
        return np.array([[c1 + c2 + 2.0 * a, c2 + a], [c2 + a, c2]])

    def mass_matrix_inverse(q):
        a = c3 * math.cos(q[1])
        m11 = c1 + c2 + 2.0 * a
        m12 = c2 + a
        det = m11 * c2 - m12 * m12
        return np.array([[c2, -m12], [-m12, m11]]) / det

    def mass_matrix_qderiv(q, w):
        s = -c3 * math.sin(q[1]) * w[1]
        return np.array([[2.0 * s, s], [s, 0.0]])

    def potential(q):
        return c4 * g * math.cos(q[0]) + c5 * g * math.cos(q[0] + q[1])

    def potential_gradient(q):
        s12 = c5 * g * math.sin(q[0] + q[1])
        return np.array([-c4 * g * math.sin(q[0]) - s12, -s12])

    def coriolis(q, v):
        # Christoffel construction specialised to M depending on q2 only.
        gamma = c3 * math.sin(q[1])
        return np.array([
            [-gamma * v[1], -gamma * (v[0] + v[1])],
            [gamma * v[0], 0.0],
        ])

    return MechanicalModel(
        n=2,
        mass_matrix=mass_matrix,
        potential=potential,
        potential_gradient=potential_gradient,
        mass_matrix_qderiv=mass_matrix_qderiv,
        coriolis=coriolis,
        mass_matrix_inverse=mass_matrix_inverse,
    )


def two_link_coriolis_generic(params: TwoLinkParams, q: Vector, v: Vector) -> np.ndarray:
    """Christoffel-symbol Coriolis matrix computed from the mass-matrix derivative."""
    model = two_link_model(params)
    return christoffel_coriolis(model.mass_matrix_qderiv, 2, q, v)


def forward_kinematics(params: TwoLinkParams, q: Vector) -> np.ndarray:
    """Tool-centre-point position; angles are measured from the upright axis."""
    s1, c1 = math.sin(q[0]), math.cos(q[0])
    s12, c12 = math.sin(q[0] + q[1]), math.cos(q[0] + q[1])
    return np.array([params.L1 * s1 + params.L2 * s12,
                     params.L1 * c1 + params.L2 * c12])


def kinematic_jacobian(params: TwoLinkParams, q: Vector) -> np.ndarray:
    c1 = params.L1 * math.cos(q[0])
    s1 = params.L1 * math.sin(q[0])
    c12 = params.L2 * math.cos(q[0] + q[1])
    s12 = params.L2 * math.sin(q[0] + q[1])
    return np.array([[c1 + c12, c12], [-s1 - s12, -s12]])


def kinematic_jacobian_dot(params: TwoLinkParams, q: Vector, qdot: Vector) -> np.ndarray:
    """Time derivative of the kinematic Jacobian along q(t) with velocity qdot."""
    w1 = qdot[0]
    w12 = qdot[0] + qdot[1]
    c1 = params.L1 * math.cos(q[0])
    s1 = params.L1 * math.sin(q[0])
    c12 = params.L2 * math.cos(q[0] + q[1])
    s12 = params.L2 * math.sin(q[0] + q[1])
    return np.array([[-s1 * w1 - s12 * w12, -s12 * w12],
                     [-c1 * w1 - c12 * w12, -c12 * w12]])


class UnreachableTargetError(ValueError):
    """Requested Cartesian point lies outside the arm's annular workspace."""


def inverse_kinematics(params: TwoLinkParams, xi: Vector, elbow: str = "down") -> np.ndarray:
    """Joint angles reproducing the Cartesian point ``xi``.

    The elbow branch fixes the sign of the second joint angle ("down" gives
    q2 <= 0).  Points at the exact outer boundary (full extension) are
    accepted; otherwise points within 1e-9 of either workspace boundary are
    rejected as numerically singular.
    """
    if elbow not in ("up", "down"):
        raise ValueError("elbow must be 'up' or 'down'")
    L1, L2 = params.L1, params.L2
    x, y = float(xi[0]), float(xi[1])
    r2 = x * x + y * y
    r = math.sqrt(r2)
    outer = L1 + L2
    inner = abs(L1 - L2)

    if abs(r - outer) <= 1e-12 * outer:
        q2 = 0.0
    else:
        if r > outer or r < inner:
            raise UnreachableTargetError(f"point at radius {r:.6g} outside ({inner:.6g}, {outer:.6g})")
        if outer - r < 1e-9 or (inner > 0.0 and r - inner < 1e-9):
            raise UnreachableTargetError(f"point at radius {r:.6g} too close to workspace boundary")
        cos_q2 = (r2 - L1 * L1 - L2 * L2) / (2.0 * L1 * L2)
        cos_q2 = min(1.0, max(-1.0, cos_q2))
        q2 = math.acos(cos_q2)
        if elbow == "down":
            q2 = -q2

    k1 = L1 + L2 * math.cos(q2)
    k2 = L2 * math.sin(q2)
    q1 = math.atan2(x, y) - math.atan2(k2, k1)
    return np.array([q1, q2])


@dataclass(frozen=True)
class CircleReference:
    """Circular Cartesian reference for the arm's tool centre point.

    The circle has centre (L1, L1) and radius L2/2 and is traversed at the
    angular rate ``omega``.  Joint-space references are obtained through the
    inverse kinematics; velocities and accelerations through the kinematic
    Jacobian.
    """

    params: TwoLinkParams
    omega: float = 0.1
    elbow: str = "down"

    def __post_init__(self):
        L1, L2 = self.params.L1, self.params.L2
        centre = math.hypot(L1, L1)
        radius = 0.5 * L2
        if centre + radius >= L1 + L2 or centre - radius <= abs(L1 - L2):
            raise UnreachableTargetError("reference circle leaves the reachable annulus")

    def cartesian(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        L1, L2 = self.params.L1, self.params.L2
        w, r = self.omega, 0.5 * L2
        c, s = math.cos(w * t), math.sin(w * t)
        xi = np.array([L1 + r * c, L1 + r * s])
        xi_dot = np.array([-r * w * s, r * w * c])
        xi_ddot = np.array([-r * w * w * c, -r * w * w * s])
        return xi, xi_dot, xi_ddot

    def __call__(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return circle_reference(self, t)


def circle_reference(ref: CircleReference, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint-space reference (q_d, q_d_dot, q_d_ddot) at time t."""
    if t < -1e-12:
        raise ValueError("reference time must be nonnegative")
    xi, xi_dot, xi_ddot = ref.cartesian(t)
    q_d = inverse_kinematics(ref.params, xi, elbow=ref.elbow)
    J = kinematic_jacobian(ref.params, q_d)
    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    if abs(det) < 1e-10:
        raise UnreachableTargetError("kinematic Jacobian is singular on the reference")
    q_d_dot = np.linalg.solve(J, xi_dot)
    Jdot = kinematic_jacobian_dot(ref.params, q_d, q_d_dot)
    q_d_ddot = np.linalg.solve(J, xi_ddot - Jdot @ q_d_dot)
    return q_d, q_d_dot, q_d_ddot
