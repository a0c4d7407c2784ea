"""Optimal control of backward stochastic evolution equations on Brownian lattices."""

from .continuation import ContinuationConfig, ContinuationReport, solve_hamiltonian_system
from .control import (CostValue, InternalInconsistency, check_necessary_condition, evaluate_cost,
                      perturbation_test, random_control, solve_optimal_control, zero_control)
from .gelfand import EvolutionCoefficients, Field, GelfandTriple, MalformedInput
from .lattice import AdaptedProcess, BrownianLattice, TimeGrid, TripleProcess
from .lq import closed_form_lq, lq_problem
from .oracle import brute_force_oracle
from .parabolic import ParabolicProblem, assemble, heat_decay_reference, weak_solution_residual
from .problem import ControlProblem, SolverError
from .solvers import solve_bsee, solve_decoupled, solve_see

__all__ = ["AdaptedProcess", "BrownianLattice", "ContinuationConfig", "ContinuationReport",
           "ControlProblem", "CostValue", "EvolutionCoefficients", "Field", "GelfandTriple",
           "InternalInconsistency", "MalformedInput", "ParabolicProblem", "SolverError", "TimeGrid",
           "TripleProcess", "assemble", "brute_force_oracle", "check_necessary_condition",
           "closed_form_lq", "evaluate_cost", "heat_decay_reference", "lq_problem",
           "perturbation_test", "random_control", "solve_bsee", "solve_decoupled",
           "solve_hamiltonian_system", "solve_optimal_control", "solve_see",
           "weak_solution_residual", "zero_control"]
