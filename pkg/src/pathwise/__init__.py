"""Pathwise stochastic calculus on sampled paths.

Lebesgue-type dyadic stopping times, quadratic variation and Itô integrals
computed path by path, an Euler scheme on those stopping times, the
test-function machinery of the L1 uniqueness argument, and ODE transforms
of one-dimensional SDEs.
"""

__version__ = "0.1.0"

from .paths import (SampledPath, TimeChange, PathBatch, generate_brownian, brownian_path,
                    compose_time_change, piecewise_linear_bv_approximation, write_path_csv,
                    read_path_csv, write_batch_binary, read_batch_binary)
from .partition import (LebesguePartition, QVResult, lebesgue_stopping_times, discrete_qv,
                        estimate_qv, wiener_calibration, qv_time_change_check, resolution_cap)
from .integrate import (StepFunction, IntegralResult, step_integral, ito_integral,
                        stieltjes_integral, ito_formula_residual, integral_time_change_check)
from .models import CoefficientPair, preset, custom, limit_equation, PRESET_NAMES
from .sde_euler import (validate_coefficients, euler_solve, reference_solution,
                        convergence_experiment, ConvergenceReport)
from .yamada import (TestFunctionParams, psi, phi, phi_prime, phi_second, uniqueness_gap,
                     gronwall_bound_replay)
from .doss_sussmann import (FlowTable, TransformedDrift, build_flow, solve_Y,
                            assemble_solution, doss_sussmann_experiment, lamperti_solve)

__all__ = [
    "__version__",
    "SampledPath",
    "TimeChange",
    "PathBatch",
    "generate_brownian",
    "brownian_path",
    "compose_time_change",
    "piecewise_linear_bv_approximation",
    "write_path_csv",
    "read_path_csv",
    "write_batch_binary",
    "read_batch_binary",
    "LebesguePartition",
    "QVResult",
    "lebesgue_stopping_times",
    "discrete_qv",
    "estimate_qv",
    "wiener_calibration",
    "qv_time_change_check",
    "resolution_cap",
    "StepFunction",
    "IntegralResult",
    "step_integral",
    "ito_integral",
    "stieltjes_integral",
    "ito_formula_residual",
    "integral_time_change_check",
    "CoefficientPair",
    "preset",
    "custom",
    "limit_equation",
    "PRESET_NAMES",
    "validate_coefficients",
    "euler_solve",
    "reference_solution",
    "convergence_experiment",
    "ConvergenceReport",
    "TestFunctionParams",
    "psi",
    "phi",
    "phi_prime",
    "phi_second",
    "uniqueness_gap",
    "gronwall_bound_replay",
    "FlowTable",
    "TransformedDrift",
    "build_flow",
    "solve_Y",
    "assemble_solution",
    "doss_sussmann_experiment",
    "lamperti_solve",
]
