"""Mini-batch SGD laboratory for gradient-dominated objectives.

Builds the classical smooth + gradient-dominance testbed, computes the
high-probability convergence envelopes and stability/generalization
bounds in closed form, and validates every bound by Monte Carlo at desk
scale.
"""

__version__ = "0.1.0"

from .envelopes import (BoundReport, RecursionParams, SGDEnvelopeConfig,
                        elisseeff_bound, envelope_next, expected_bound,
                        generalization_bound, hprisk_horizon, k_sequence,
                        sgd_envelope, stability_bound)
from .errors import (BatchError, CheckFailure, ConfigError, DivergenceError,
                     NumericError, PlsgdError, ProblemError, QuadratureError,
                     ScheduleError)
from .experiments import (CoupledStats, EnsembleStats, NeighborPair,
                          RiskDistribution, RiskReport, make_neighbor_pair,
                          rate_fit, run_counterexample_demo, run_coupled,
                          run_ensemble, run_risk_balance)
from .optimizer import (StepSchedule, Trajectory, recursion_check,
                        run_projected_gd, run_sgd, schedule_eval, step)
from .oracles import (GradientOracle, coupled_indices, make_oracle,
                      sample_gradient, subexponential_norm_estimate,
                      subgaussian_norm_estimate)
from .problems import (CounterexampleSpec, LogisticProblem, Problem,
                       QuadraticProblem, check_landscape, counterexample_eval,
                       flat_set_distance, make_logistic, make_quadratic)
from .streams import Stream

__all__ = [name for name in dir() if not name.startswith("_")]
