"""Mean field equilibria of nomadic agents competing for location resources."""

from .ctmc import (Generator, StationarySolution, build_generator, dominating_tail,
                   expected_occupancy, solve_kappa, steady_state)
from .equilibrium import (EquilibriumResult, MFEProblem, SolverConfig, solve_mfe,
                          validate_equilibrium, validate_point)
from .errors import (ConfigError, DegenerateLowerBound, DimensionMismatch, InvalidSystem,
                     MFEError, ModelError, MonotonicityViolation, NoBracket, NonConvergence,
                     NonPositiveRate, NotFound, OccupancyZero, OutOfRange, SingularSystem,
                     TruncationTooSmall)
from .model import (ModelParams, ResourceProcess, SharingFunction, Strategy, eval_sharing,
                    make_resource_process, strategy_from_threshold, sup_norm)
from .simulate import (simulate_coupled_dominance, simulate_finite_system,
                       simulate_location)
from .stopping import (ThresholdIntervals, ValueFunctions, optimal_threshold_set,
                       switch_value, value_bounds, value_iterate)
from .welfare import (case_study, case_study_revenues, sweep, welfare_per_agent,
                      welfare_per_location)

__all__ = [name for name in dir() if not name.startswith("_")]
