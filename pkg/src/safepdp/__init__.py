"""Safe differentiable optimal control with numpy.

Trajectory optimization under inequality and equality constraints, trajectory
derivatives from auxiliary LQR systems, and a bilevel outer loop that keeps
every iterate strictly feasible.
"""

from .auxsys import (AuxLqr, TrajectoryGradient, build_aux_barrier, build_aux_constrained,
                     build_aux_unconstrained, diff_cpmp_residual, solve_aux, solve_aux_feedback)
from .barrier import BarrierSpec, recover_multipliers, to_barrier
from .deriv import HyperDual, Point, evaluate, expand, hessian_block, jacobian
from .envs import EnvConfig, make_demos, make_env
from .errors import (ConfigError, DomainError, InconsistentEqualities, InfeasibleStart, InitNotSafe,
                     MaxItersExceeded, NonFiniteError, NonPositiveCurvature, SafePDPError, SafetyBreach,
                     SafetyError, SingularLuu, SolverError, UnsafeInitialization)
from .ocp import (ActiveSet, Multipliers, ProblemSpec, Trajectory, constraint_report, cpmp_residual,
                  identify_active, rollout, total_cost)
from .outer import OuterOptions, RunLog, SolverPipeline, TaskSpec, outer_gradient, outer_objective, run
from .trajopt import SolveOptions, SolveResult, default_schedule, solve_constrained, solve_unconstrained

__version__ = "0.1.0"
