"""Symplectic discrete-time feedback control for mechanical systems."""

from .controllers import (ControllerError, ControllerSpec, ControllerState,
                          computed_torque_target, control_computed_torque,
                          control_general_hamiltonian, control_lagrangian,
                          control_pd_gravity, control_potential_shaping,
                          control_quasi_continuous_hamiltonian,
                          linear_impedance_target, make_controller,
                          pd_hamiltonian_target, pd_lagrangian_target,
                          potential_shaping_target, solve_stage_hamiltonian,
                          solve_stage_hamiltonian_position_only,
                          solve_stage_lagrangian)
from .dynamics import (HAMILTONIAN_B_D, LAGRANGIAN_F_D, HamiltonianState,
                       LagrangianState, MechanicalModel, TargetDynamics,
                       build_ida_pbc_target, christoffel_coriolis, hamiltonian,
                       hamiltonian_q_gradient, lagrangian_drift,
                       legendre_to_hamiltonian, legendre_to_lagrangian)
from .harness import (LoopConfig, SimulationTrace, SweepResult,
                      convergence_study, discrete_l2_norm, empirical_orders,
                      midpoint_model_step, run_sampled_loop,
                      run_target_reference, sample_ode, sweep_max_stiffness,
                      tube_criterion)
from .integrators import (ConvergenceError, NewtonConfig, StepReport,
                          StepUnderflowError, implicit_midpoint_step,
                          integrate_adaptive, newton_solve, propagate_plant,
                          stormer_verlet_one_step,
                          stormer_verlet_partitioned_step,
                          stormer_verlet_two_step)
from .models import (CircleReference, MassSpringParams, TwoLinkParams,
                     UnreachableTargetError, circle_reference,
                     forward_kinematics, inverse_kinematics,
                     kinematic_jacobian, mass_spring_model, two_link_model)

__version__ = "0.1.0"
