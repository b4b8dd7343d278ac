"""Stage solvers, control laws, and the structural closed-loop identities."""

import math

import numpy as np
import pytest

import symcontrol as sc
from symcontrol.controllers import (ControllerState, computed_torque_target,
                                    control_computed_torque,
                                    control_general_hamiltonian,
                                    control_lagrangian, control_pd_gravity,
                                    control_potential_shaping,
                                    control_quasi_continuous_hamiltonian,
                                    pd_hamiltonian_target, pd_lagrangian_target,
                                    potential_shaping_target,
                                    solve_stage_hamiltonian,
                                    solve_stage_hamiltonian_position_only,
                                    solve_stage_lagrangian)
from symcontrol.dynamics import LAGRANGIAN_F_D, TargetDynamics, lagrangian_drift
from symcontrol.harness import LoopConfig, midpoint_model_step, run_sampled_loop

MS = sc.mass_spring_model(sc.MassSpringParams(m=1.0, k=0.5))
TL_PARAMS = sc.TwoLinkParams()
TL = sc.two_link_model(TL_PARAMS)
NEWTON = sc.NewtonConfig()


class TestStageHamiltonian:
    def test_fixed_point_at_equilibrium(self):
        target = sc.linear_impedance_target(1.0, 2.0, 0.5)
        qh, ph, rep = solve_stage_hamiltonian(MS, target, np.zeros(1), np.zeros(1), 0.1)
        assert rep.converged
        assert qh == pytest.approx([0.0], abs=1e-12)
        assert ph == pytest.approx([0.0], abs=1e-12)

    def test_linear_closed_form(self):
        # hand linear algebra: p_half = -0.05/1.0025, q_half = 1 + 0.05 p_half
        target = sc.linear_impedance_target(1.0, 1.0, 0.0)
        qh, ph, rep = solve_stage_hamiltonian(MS, target, np.array([1.0]), np.array([0.0]), 0.1)
        assert rep.converged
        assert ph == pytest.approx([-0.05 / 1.0025], abs=1e-10)
        assert qh == pytest.approx([1.0 + 0.05 * (-0.05 / 1.0025)], abs=1e-10)
        assert qh == pytest.approx([0.9975062], abs=1e-7)
        assert ph == pytest.approx([-0.0498753], abs=1e-7)

    def test_two_link_pd_target_residuals(self):
        target = pd_hamiltonian_target(TL, np.diag([0.1, 0.1]), np.diag([0.1, 0.1]), np.zeros(2))
        rng = np.random.default_rng(0)
        for _ in range(5):
            q_k = rng.uniform(-np.pi, np.pi, 2)
            p_k = rng.standard_normal(2) * 0.1
            h = 0.05
            qh, ph, rep = solve_stage_hamiltonian(TL, target, q_k, p_k, h)
            assert rep.converged
            r1 = TL.mass_matrix(qh) @ (qh - q_k) - 0.5 * h * ph
            r2 = ph - p_k - 0.5 * h * target.rhs(qh, ph, 0.0)
            assert np.abs(r1).max() <= NEWTON.abs_tol
            assert np.abs(r2).max() <= NEWTON.abs_tol


class TestStageHamiltonianPositionOnly:
    def test_rest_at_equilibrium(self):
        target = sc.linear_impedance_target(1.0, 2.0, 0.5)
        state = ControllerState(q_half_prev=np.zeros(1), v0_or_p0=np.zeros(1),
                                first_step=False)
        qh, ph, p_k, rep = solve_stage_hamiltonian_position_only(
            MS, target, np.zeros(1), state, 0.1)
        assert rep.converged
        assert qh == pytest.approx([0.0], abs=1e-12)
        assert ph == pytest.approx([0.0], abs=1e-12)
        assert p_k == pytest.approx([0.0], abs=1e-12)

    def test_reconstruction_arithmetic(self):
        # unit mass: p_k = (q_half - q_half_prev) / h = (1.0 - 0.9) / 0.1
        model = sc.mass_spring_model(sc.MassSpringParams(m=1.0, k=0.0))
        M = model.mass_matrix(np.zeros(1))
        assert M @ (np.array([1.0]) - np.array([0.9])) / 0.1 == pytest.approx([1.0])

    def test_first_step_needs_initial_momentum(self):
        target = sc.linear_impedance_target(1.0, 2.0, 0.5)
        state = ControllerState(q_half_prev=None, v0_or_p0=None)
        with pytest.raises(sc.ControllerError):
            solve_stage_hamiltonian_position_only(MS, target, np.zeros(1), state, 0.1)

    @staticmethod
    def _two_step_residual(h, steps):
        # constant mass, pure potential shaping, loop closed over the
        # midpoint model; returns the largest two-step position-recursion
        # defect of the stage sequence
        c = 2.0
        spec = sc.ControllerSpec(law="potential_shaping", mode="symplectic",
                                 feedback="position_only", n=1,
                                 V_d_gradient=lambda q: c * q)
        cfg = LoopConfig(model=MS, controller=spec,
                         initial=sc.HamiltonianState(q=[1.0], p=[0.0]),
                         h=h, T=steps * h, plant="midpoint_model")
        trace = run_sampled_loop(cfg)
        assert not trace.failed
        q_half = trace.q_half[:, 0]
        res = q_half[2:] - 2.0 * q_half[1:-1] + q_half[:-2] \
            + h * h * c * q_half[1:-1]
        return float(np.abs(res).max())

    def test_two_step_recursion_on_model_plant(self):
        # at small h the recursion holds to the Newton tolerance over more
        # than a quarter oscillation period
        assert self._two_step_residual(0.002, 1200) <= 10 * NEWTON.abs_tol

    def test_two_step_recursion_structural_defect_scaling(self):
        # re-reconstructing the momentum every interval leaves a residual
        # that vanishes like h^4; document the scaling
        r1 = self._two_step_residual(0.1, 400)
        r2 = self._two_step_residual(0.05, 800)
        assert 12.0 <= r1 / r2 <= 20.0

    def test_reconstruction_identity_general_mass(self):
        # q_half = q_half_prev + h * Minv(q_k) p_k holds by construction
        target = pd_hamiltonian_target(TL, np.diag([0.1, 0.1]), np.diag([0.1, 0.1]), np.zeros(2))
        state = ControllerState(q_half_prev=np.array([3.0, 0.1]),
                                v0_or_p0=np.zeros(2), first_step=False)
        q_k = np.array([3.05, 0.08])
        h = 0.05
        qh, ph, p_k, rep = solve_stage_hamiltonian_position_only(TL, target, q_k, state, h)
        assert rep.converged
        back = np.array([3.0, 0.1]) + h * TL.solve_mass(q_k, p_k)
        assert np.abs(back - qh).max() <= 1e-13

    def test_elimination_matches_full_state_fed_reconstruction(self):
        # substituting the reconstruction into the stage system must give the
        # same stages as a full-state solve fed the reconstructed momentum
        target = pd_hamiltonian_target(TL, np.diag([0.1, 0.1]), np.diag([0.1, 0.1]), np.zeros(2))
        state = ControllerState(q_half_prev=np.array([2.9, 0.2]),
                                v0_or_p0=np.zeros(2), first_step=False)
        q_k = np.array([2.95, 0.18])
        h = 0.05
        qh, ph, p_k, rep = solve_stage_hamiltonian_position_only(TL, target, q_k, state, h)
        assert rep.converged
        qh2, ph2, rep2 = solve_stage_hamiltonian(TL, target, q_k, p_k, h)
        assert rep2.converged
        assert np.abs(qh - qh2).max() <= 10 * NEWTON.abs_tol
        assert np.abs(ph - ph2).max() <= 10 * NEWTON.abs_tol


class TestStageLagrangian:
    def test_rest_at_fixed_point(self):
        f_d = pd_lagrangian_target(TL, np.diag([0.1, 0.1]), np.diag([0.1, 0.1]), np.zeros(2))
        qh, vh, v_k, rep = solve_stage_lagrangian(TL, f_d, np.zeros(2), None, 0.1,
                                                  v_k=np.zeros(2))
        assert rep.converged
        assert np.abs(qh).max() <= 1e-12
        assert np.abs(vh).max() <= 1e-12

    def test_scalar_linear_closed_form(self):
        # f_d = -(K/M_d) q - (D/M_d) v, solved by hand as a 2x2 linear system
        K, D, M_d, h = 0.5, 0.2, 1.0, 0.1
        f_d = TargetDynamics(kind=LAGRANGIAN_F_D,
                             rhs=lambda q, v, t: -(K / M_d) * q - (D / M_d) * v)
        q_k, v_k = np.array([1.0]), np.array([0.3])
        A = np.array([[1.0, -0.5 * h], [0.5 * h * K / M_d, 1.0 + 0.5 * h * D / M_d]])
        rhs = np.array([q_k[0], v_k[0]])
        closed = np.linalg.solve(A, rhs)
        qh, vh, _, rep = solve_stage_lagrangian(MS, f_d, q_k, None, h, v_k=v_k)
        assert rep.converged
        assert qh == pytest.approx([closed[0]], abs=1e-10)
        assert vh == pytest.approx([closed[1]], abs=1e-10)

    def test_midpoint_velocity_identity(self):
        # v_half = 2 (q_half - q_k) / h is a linear combination of residuals
        rng = np.random.default_rng(1)
        ref = sc.CircleReference(TL_PARAMS, omega=0.1)
        f_d = computed_torque_target(np.diag([0.1, 0.013]), np.diag([0.3, 0.03]),
                                     np.diag([0.3, 0.03]), ref)
        for _ in range(5):
            q_k = sc.circle_reference(ref, 0.0)[0] + 0.1 * rng.standard_normal(2)
            v_k = 0.1 * rng.standard_normal(2)
            h = 0.04
            qh, vh, _, rep = solve_stage_lagrangian(TL, f_d, q_k, None, h, t_k=1.0, v_k=v_k)
            assert rep.converged
            assert np.abs(vh - 2.0 * (qh - q_k) / h).max() <= 1e-12

    def test_first_step_requires_initial_velocity(self):
        f_d = pd_lagrangian_target(TL, np.diag([0.1, 0.1]), np.diag([0.1, 0.1]), np.zeros(2))
        state = ControllerState(q_half_prev=None, v0_or_p0=None)
        with pytest.raises(sc.ControllerError):
            solve_stage_lagrangian(TL, f_d, np.zeros(2), state, 0.1)


class TestControlLaws:
    def test_potential_shaping_no_shaping(self):
        stages = (np.array([0.4]), np.array([0.1]))
        u = control_potential_shaping(MS, MS.potential_gradient, stages)
        assert u == pytest.approx([0.0], abs=1e-15)

    def test_potential_shaping_linear(self):
        k, c = 0.5, 2.0
        stages = (np.array([0.7]), np.array([0.0]))
        u = control_potential_shaping(MS, lambda q: c * q, stages)
        assert u == pytest.approx([(k - c) * 0.7], abs=1e-15)

    def test_potential_shaping_two_link_at_upright(self):
        grad_Vd = lambda q: np.diag([0.1, 0.1]) @ q
        stages = (np.zeros(2), np.zeros(2))
        u = control_potential_shaping(TL, grad_Vd, stages)
        assert u == pytest.approx(-grad_Vd(np.zeros(2)), abs=1e-15)

    def test_general_hamiltonian_open_loop_target(self):
        target = TargetDynamics(
            kind=sc.HAMILTONIAN_B_D,
            rhs=lambda q, p, t: -sc.hamiltonian_q_gradient(TL, q, p))
        stages = (np.array([0.3, -0.6]), np.array([0.05, 0.01]))
        u = control_general_hamiltonian(TL, target, stages)
        assert np.abs(u).max() == 0.0

    def test_general_hamiltonian_mass_spring_law(self):
        k, c, d, m = 0.5, 2.0, 0.3, 1.0
        target = sc.linear_impedance_target(m, c, d)
        qh, ph = np.array([0.8]), np.array([-0.2])
        u = control_general_hamiltonian(MS, target, (qh, ph))
        assert u == pytest.approx([(k - c) * 0.8 - (d / m) * (-0.2)], abs=1e-14)

    def test_general_equals_pd_on_pd_target(self):
        K = np.diag([0.1, 0.1])
        D = np.diag([0.1, 0.1])
        q_d = np.zeros(2)
        target = pd_hamiltonian_target(TL, K, D, q_d)
        rng = np.random.default_rng(2)
        for _ in range(10):
            qh = rng.uniform(-np.pi, np.pi, 2)
            ph = rng.standard_normal(2) * 0.2
            u1 = control_general_hamiltonian(TL, target, (qh, ph))
            u2 = control_pd_gravity("symplectic", TL, K, D, q_d, qh, TL.solve_mass(qh, ph))
            assert np.abs(u1 - u2).max() <= 1e-12

    def test_lagrangian_zero_for_matching_target(self):
        drift = lagrangian_drift(TL)
        f_d = TargetDynamics(kind=LAGRANGIAN_F_D, rhs=lambda q, v, t: drift(q, v))
        stages = (np.array([0.2, 0.4]), np.array([0.3, -0.1]))
        u = control_lagrangian(TL, drift, f_d, stages)
        assert np.abs(u).max() == 0.0

    def test_lagrangian_pd_expansion(self):
        # M (f_d - f) with the PD target expands to the gravity-compensated
        # PD law evaluated at the stage values
        K = np.diag([0.1, 0.1])
        D = np.diag([0.1, 0.1])
        q_d = np.zeros(2)
        drift = lagrangian_drift(TL)
        f_d = pd_lagrangian_target(TL, K, D, q_d)
        rng = np.random.default_rng(3)
        for _ in range(10):
            qh = rng.uniform(-np.pi, np.pi, 2)
            vh = rng.standard_normal(2) * 0.5
            u1 = control_lagrangian(TL, drift, f_d, (qh, vh))
            u2 = control_pd_gravity("symplectic", TL, K, D, q_d, qh, vh)
            assert np.abs(u1 - u2).max() <= 1e-12

    def test_lagrangian_computed_torque_equivalence(self):
        # M (f_d - f) with the tracking target equals the explicit
        # feedback-linearisation law at the same stage values
        ref = sc.CircleReference(TL_PARAMS, omega=0.1)
        M_d = np.diag([0.1, 0.013])
        K = np.diag([0.3, 0.03])
        D = np.diag([0.3, 0.03])
        drift = lagrangian_drift(TL)
        f_d = computed_torque_target(M_d, K, D, ref)
        rng = np.random.default_rng(4)
        for _ in range(10):
            t = rng.uniform(0.0, 60.0)
            qh = sc.circle_reference(ref, t)[0] + 0.2 * rng.standard_normal(2)
            vh = rng.standard_normal(2) * 0.3
            u1 = control_lagrangian(TL, drift, f_d, (qh, vh), t)
            u2 = control_computed_torque("symplectic", TL, M_d, K, D, ref, qh, vh, t)
            assert np.abs(u1 - u2).max() <= 1e-12

    def test_pd_gravity_compensation_at_setpoint(self):
        q_d = np.array([0.3, -0.4])
        u = control_pd_gravity("quasi_continuous", TL, np.diag([0.1, 0.1]),
                               np.diag([0.1, 0.1]), q_d, q_d, np.zeros(2))
        assert u == pytest.approx(TL.potential_gradient(q_d), abs=1e-15)

    def test_pd_gravity_hanging_example(self):
        # gravity gradient vanishes at (pi, 0); only the spring term remains
        K = np.diag([0.1, 0.1])
        D = np.diag([0.1, 0.1])
        u = control_pd_gravity("quasi_continuous", TL, K, D, np.zeros(2),
                               np.array([math.pi, 0.0]), np.zeros(2))
        assert u == pytest.approx([-0.1 * math.pi, 0.0], abs=1e-12)

    def test_pd_gravity_symplectic_at_stage_setpoint(self):
        q_d = np.array([0.2, 0.1])
        u = control_pd_gravity("symplectic", TL, np.diag([0.1, 0.1]),
                               np.diag([0.1, 0.1]), q_d, q_d, np.zeros(2))
        assert u == pytest.approx(TL.potential_gradient(q_d), abs=1e-15)

    def test_computed_torque_pure_feedforward(self):
        ref_q = np.array([0.5, -0.2])
        ref_v = np.array([0.1, 0.05])
        ref_a = np.array([-0.02, 0.01])
        reference = lambda t: (ref_q, ref_v, ref_a)
        M_d = np.diag([0.1, 0.013])
        K = np.diag([0.3, 0.03])
        D = np.diag([0.3, 0.03])
        u = control_computed_torque("quasi_continuous", TL, M_d, K, D, reference,
                                    ref_q, ref_v, 0.0)
        expected = TL.coriolis(ref_q, ref_v) @ ref_v + TL.potential_gradient(ref_q) \
            + TL.mass_matrix(ref_q) @ ref_a
        assert u == pytest.approx(expected, abs=1e-13)

    def test_computed_torque_static_reference(self):
        q_d = np.array([0.3, 0.7])
        reference = lambda t: (q_d, np.zeros(2), np.zeros(2))
        u = control_computed_torque("quasi_continuous", TL, np.diag([0.1, 0.013]),
                                    np.diag([0.3, 0.03]), np.diag([0.3, 0.03]),
                                    reference, q_d, np.zeros(2), 0.0)
        assert u == pytest.approx(TL.potential_gradient(q_d), abs=1e-13)

    def test_computed_torque_term_by_term(self):
        M_d = np.diag([0.1, 0.013])
        K = np.diag([0.3, 0.03])
        D = np.diag([0.3, 0.03])
        ref = sc.CircleReference(TL_PARAMS, omega=0.1)
        rng = np.random.default_rng(5)
        t = 7.3
        q = sc.circle_reference(ref, t)[0] + 0.3 * rng.standard_normal(2)
        v = rng.standard_normal(2) * 0.4
        q_r, v_r, a_r = sc.circle_reference(ref, t)
        # independent assembly, term by term
        expected = (TL.coriolis(q, v) @ v
                    + TL.potential_gradient(q)
                    + TL.mass_matrix(q) @ a_r
                    + TL.mass_matrix(q) @ np.linalg.inv(M_d) @ (-K @ (q - q_r) - D @ (v - v_r)))
        u = control_computed_torque("quasi_continuous", TL, M_d, K, D, ref, q, v, t)
        assert u == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_quasi_continuous_mass_spring_law(self):
        k, c, d, m = 0.5, 2.0, 0.3, 1.0
        target = sc.linear_impedance_target(m, c, d)
        u = control_quasi_continuous_hamiltonian(MS, target, np.array([0.6]), np.array([0.4]))
        assert u == pytest.approx([(k - c) * 0.6 - (d / m) * 0.4], abs=1e-14)

    def test_quasi_continuous_equilibrium_consistency(self):
        target = sc.linear_impedance_target(1.0, 2.0, 0.3)
        u = control_quasi_continuous_hamiltonian(MS, target, np.zeros(1), np.zeros(1))
        assert np.abs(u).max() == 0.0

    def test_symplectic_approaches_quasi_continuous_as_h_shrinks(self):
        # along matched states the two laws differ by O(h)
        target = sc.linear_impedance_target(1.0, 2.0, 0.3)
        q_k, p_k = np.array([0.9]), np.array([-0.3])
        diffs = []
        for h in (1e-2, 5e-3, 2.5e-3):
            qh, ph, rep = solve_stage_hamiltonian(MS, target, q_k, p_k, h)
            assert rep.converged
            u_s = control_general_hamiltonian(MS, target, (qh, ph))
            u_qc = control_quasi_continuous_hamiltonian(MS, target, q_k, p_k)
            diffs.append(np.abs(u_s - u_qc).max())
        for d0, d1 in zip(diffs, diffs[1:]):
            assert 1.6 <= d0 / d1 <= 2.4

    def test_variant_validation(self):
        with pytest.raises(ValueError):
            control_pd_gravity("other", TL, np.eye(2), np.eye(2), np.zeros(2),
                               np.zeros(2), np.zeros(2))


class TestControllerSpecValidation:
    def test_asymmetric_gain_rejected(self):
        with pytest.raises(ValueError):
            sc.ControllerSpec(law="pd_gravity", n=2, K=np.array([[1.0, 0.2], [0.0, 1.0]]),
                              D=np.eye(2), q_d=np.zeros(2))

    def test_indefinite_gain_rejected(self):
        with pytest.raises(ValueError):
            sc.ControllerSpec(law="pd_gravity", n=2, K=np.diag([1.0, -0.5]),
                              D=np.eye(2), q_d=np.zeros(2))

    def test_m_d_must_be_definite(self):
        ref = lambda t: (np.zeros(2), np.zeros(2), np.zeros(2))
        with pytest.raises(ValueError):
            sc.ControllerSpec(law="computed_torque", n=2, M_d=np.diag([1.0, 0.0]),
                              K=np.eye(2), D=np.eye(2), reference=ref)

    def test_missing_requirements(self):
        with pytest.raises(ValueError):
            sc.ControllerSpec(law="potential_shaping", n=1)
        with pytest.raises(ValueError):
            sc.ControllerSpec(law="general_hamiltonian", n=1)
        with pytest.raises(ValueError):
            sc.ControllerSpec(law="unknown", n=1)


class TestClosedLoopStructure:
    def test_symplectic_law_reproduces_target_on_model_plant(self):
        # feeding the implicit law into the midpoint model must land on the
        # target's own midpoint step
        target = sc.linear_impedance_target(1.0, 2.0, 0.3)
        state = sc.HamiltonianState(q=[1.0], p=[0.0])
        h = 0.1
        qh, ph, rep = solve_stage_hamiltonian(MS, target, state.q, state.p, h)
        assert rep.converged
        u = control_general_hamiltonian(MS, target, (qh, ph))
        nxt = midpoint_model_step(MS, state, u, h)
        assert nxt.q == pytest.approx(2.0 * qh - state.q, abs=10 * NEWTON.abs_tol)
        assert nxt.p == pytest.approx(2.0 * ph - state.p, abs=10 * NEWTON.abs_tol)

    def test_symplectic_pd_reproduces_target_on_model_plant_two_link(self):
        K = np.diag([0.1, 0.1])
        D = np.diag([0.1, 0.1])
        q_d = np.zeros(2)
        target = pd_hamiltonian_target(TL, K, D, q_d)
        state = sc.HamiltonianState(q=[math.pi, 0.0], p=[0.02, -0.01])
        h = 0.05
        qh, ph, rep = solve_stage_hamiltonian(TL, target, state.q, state.p, h)
        assert rep.converged
        u = control_pd_gravity("symplectic", TL, K, D, q_d, qh, TL.solve_mass(qh, ph))
        nxt = midpoint_model_step(TL, state, u, h)
        assert np.abs(nxt.q - (2.0 * qh - state.q)).max() <= 10 * NEWTON.abs_tol
        assert np.abs(nxt.p - (2.0 * ph - state.p)).max() <= 10 * NEWTON.abs_tol

    def test_position_only_tracks_stormer_verlet_partitioned(self):
        # per-step difference between the position-only closed loop and the
        # generalised Stormer-Verlet map shrinks like h^3
        K = np.diag([0.1, 0.1])
        D = np.diag([0.1, 0.1])
        q_d = np.zeros(2)
        target = pd_hamiltonian_target(TL, K, D, q_d)
        a = lambda q, p: TL.solve_mass(q, p)
        b = lambda q, p: target.rhs(q, p, 0.0)
        tight = sc.NewtonConfig(abs_tol=1e-13)

        def max_defect(h):
            spec = sc.ControllerSpec(law="pd_gravity", mode="symplectic",
                                     feedback="position_only", n=2, K=K, D=D, q_d=q_d)
            cfg = LoopConfig(model=TL, controller=spec,
                             initial=sc.HamiltonianState(q=[math.pi, 0.0], p=[0.0, 0.0]),
                             h=h, T=2.0, plant="midpoint_model", newton=tight)
            trace = run_sampled_loop(cfg)
            assert not trace.failed
            worst = 0.0
            for k in range(1, trace.steps):
                q_half_prev = trace.q_half[k - 1]
                p_k = TL.mass_matrix(trace.q[k]) @ (trace.q_half[k] - q_half_prev) / h
                qh_sv, _ = sc.stormer_verlet_partitioned_step(a, b, q_half_prev,
                                                              p_k, h, tight)
                defect = np.abs(qh_sv - trace.q_half[k]).max()
                worst = max(worst, defect)
            return worst

        d_h = max_defect(0.08)
        d_h2 = max_defect(0.04)
        assert 5.0 <= d_h / d_h2 <= 12.0
