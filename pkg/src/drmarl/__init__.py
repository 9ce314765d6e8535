"""Distributionally robust cooperative multi-agent value factorization.

Exact tabular robust solvers and IGM/DrIGM checkers, small neural robust
VDN/QMIX/QTRAN trainers, benchmark Dec-POMDPs and an evaluation harness.
"""

from .decpomdp import History, ModelError, NotInImageError, TabularDecPomdp, Transition, Violation, validate
from .uncertainty import (AssumptionViolation, Contamination, FiniteSet, TotalVariation, parse_set,
                          tv_dual_minimize, worst_case_expectation)
from .solver import (JointQTable, IndividualQTables, build_robust_individual_q, check_drigm,
                     check_factorization_conditions, check_igm, extract_worst_model, fit_vdn_decomposition,
                     lower_bound_check, robust_value_iteration, solve_nominal)

__version__ = "0.1.0"
