"""Mean-field analysis and simulation of CSMA random backoff on class interference graphs."""
from .envchain import (EnvKernel, EnvStationary, StateSpaceError, build_kernel, domination_check,
                       ghi, stationary_dist)
from .meanfield import IntegrationError, full_interference_rhs, integrate, mean_rates, ode_rhs
from .model import (BackoffPolicy, NetworkSpec, SpecError, chain_spec, from_dict, load_spec,
                    serialize, single_class_spec, to_dict, validate_spec)
from .simulator import SimReport, Simulation, chaos_metric, occupation_check, simulate
from .stationary import (ConvergenceError, FixedPointResult, InfeasibleError,
                         closed_form_full_interference, full_interference_root,
                         solve_fixed_point)

__version__ = "0.1.0"

__all__ = [
    "BackoffPolicy", "ConvergenceError", "EnvKernel", "EnvStationary", "FixedPointResult",
    "InfeasibleError", "IntegrationError", "NetworkSpec", "SimReport", "Simulation",
    "SpecError", "StateSpaceError", "build_kernel", "chain_spec", "chaos_metric",
    "closed_form_full_interference", "domination_check", "from_dict", "full_interference_rhs",
    "full_interference_root", "ghi", "integrate", "load_spec", "mean_rates",
    "occupation_check", "ode_rhs", "serialize", "simulate", "single_class_spec",
    "solve_fixed_point", "stationary_dist", "to_dict", "validate_spec",
]
