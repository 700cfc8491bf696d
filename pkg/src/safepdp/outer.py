"""Bilevel outer loop: barrier-augmented task loss, chain-rule gradient and safe descent.

An inner *pipeline* maps the outer parameter ``theta`` to one or more
trajectories (``forward``) and supplies their derivatives (``backward``).  A
:class:`TaskSpec` scores those trajectories.  :func:`run` performs plain
gradient descent on ``W = loss - eps * sum(ln(-R))`` over a ladder of
``(eps, gamma)`` pairs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .auxsys import (TrajectoryGradient, build_aux_barrier, build_aux_constrained, build_aux_unconstrained,
                     solve_aux)
from .barrier import recover_multipliers, to_barrier
from .errors import (DomainError, NonFiniteError, SafetyBreach, SolverError, UnsafeInitialization)
from .ocp import DEFAULT_DELTA, ProblemSpec, Trajectory, constraint_report, identify_active
from .trajopt import SolveOptions, default_schedule, solve_constrained, solve_unconstrained

log = logging.getLogger(__name__)

STRATEGIES = ("A", "B", "C")


@dataclass
class TaskSpec:
    """Outer task over a list of trajectories.

    ``loss_grad`` returns ``(dl/dxi for each trajectory, dl/dtheta)`` with
    trajectory gradients ordered as :meth:`Trajectory.flat`.
    ``constraints_vjp(trajs, theta, w)`` returns the same pair for ``w' R``.
    """

    loss: Callable
    loss_grad: Callable
    constraints: Callable = None
    constraints_vjp: Callable = None

    def R(self, trajs, theta) -> np.ndarray:
        if self.constraints is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self.constraints(trajs, theta), dtype=float))


@dataclass
class OuterOptions:
    epsilon: float = 1e-2
    gamma: float = 1e-2
    lr: float = 1e-2
    max_iters: int = 100
    continuation: Optional[Sequence] = None  # (eps, gamma) pairs; default [(epsilon, gamma)]
    seed: int = 0
    gradient_strategy: str = "B"
    grad_tol: float = 1e-6
    max_halvings: int = 20
    traj_every: int = 0  # keep trajectories every k iterations (0: first and last only)

    def __post_init__(self):
        if self.gradient_strategy not in STRATEGIES:
            raise ValueError(f"gradient_strategy must be one of {STRATEGIES}")
        for e, g in self.ladder():
            if not (e > 0 and g > 0):
                raise ValueError("continuation pairs must be strictly positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def ladder(self) -> list:
        if self.continuation:
            return [(float(e), float(g)) for e, g in self.continuation]
        return [(float(self.epsilon), float(self.gamma))]


@dataclass
class RunLog:
    records: list = field(default_factory=list)    # dicts: iter, rung, epsilon, gamma, W, loss, max_R, max_g, grad_norm, theta
    trajectories: dict = field(default_factory=dict)  # iter -> list[Trajectory]
    rung_theta: list = field(default_factory=list)  # final theta of each rung
    rung_loss: list = field(default_factory=list)
    theta: Optional[np.ndarray] = None
    converged: list = field(default_factory=list)  # per rung: grad-norm tolerance reached
    wall_clock: float = 0.0

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.records])

    def certify(self, constrained: bool = True):
        """Raise SafetyBreach unless every logged iterate is strictly safe."""
        for r in self.records:
            if r["max_g"] >= 0 or (constrained and r["max_R"] >= 0):
                raise SafetyBreach(f"iterate {r['iter']} is not strictly safe (max_g={r['max_g']}, max_R={r['max_R']})")
        return True


def outer_objective(task: TaskSpec, xi, theta, epsilon: float) -> float:
    trajs = xi if isinstance(xi, (list, tuple)) else [xi]
    R = task.R(trajs, theta)
    if R.size and np.any(R >= 0):
        raise SafetyBreach(f"task constraint value {R.max():.6g} is not strictly negative")
    val = float(task.loss(trajs, theta))
    if R.size:
        val -= epsilon * float(np.sum(np.log(-R)))
    return val


def _objective_grad(task: TaskSpec, trajs, theta, epsilon):
    gx, gth = task.loss_grad(trajs, theta)
    gx = [np.asarray(g, dtype=float) for g in gx]
    gth = np.asarray(gth, dtype=float).copy()
    R = task.R(trajs, theta)
    if R.size:
        wx, wth = task.constraints_vjp(trajs, theta, -epsilon / R)
        gx = [a + np.asarray(b) for a, b in zip(gx, wx)]
        gth = gth + np.asarray(wth)
    return gx, gth


def chain(task: TaskSpec, trajs, grads: Sequence[TrajectoryGradient], theta, epsilon) -> np.ndarray:
    """dW/dtheta = dW/dtheta (direct) + sum_k dW/dxi_k * dxi_k/dtheta."""
    gx, g = _objective_grad(task, trajs, theta, epsilon)
    for a, G in zip(gx, grads):
        g = g + a @ G.flat()
    return g


class SolverPipeline:
    """Inner map given by trajectory optimization on one or more problems sharing theta.

    Strategy B solves the barrier problem and differentiates it.  Strategy C
    solves the constrained problem and differentiates the barrier problem at
    that solution.  Strategy A solves the constrained problem and
    differentiates through the active-set auxiliary system.
    """

    def __init__(self, specs: Union[ProblemSpec, Sequence[ProblemSpec]], strategy: str = "B",
                 gamma: float = 1e-2, opts: SolveOptions = None, constrained_gamma: float = 1e-4,
                 delta: float = DEFAULT_DELTA, initial_guess: Optional[Sequence[Trajectory]] = None):
        self.specs = [specs] if isinstance(specs, ProblemSpec) else list(specs)
        self.initial_guess = list(initial_guess) if initial_guess is not None else [None] * len(self.specs)
        if len(self.initial_guess) != len(self.specs):
            raise ValueError("initial_guess needs one entry per problem")
        if strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        self.strategy = strategy
        self.gamma = float(gamma)
        self.opts = opts or SolveOptions(max_iters=100, tol_grad=1e-8)
        self.constrained_gamma = float(constrained_gamma)
        self.delta = delta
        self._warm = [None] * len(self.specs)

    @property
    def r(self) -> int:
        return self.specs[0].r

    def set_gamma(self, gamma: float):
        if float(gamma) != self.gamma:
            self.gamma = float(gamma)
            self._warm = [None] * len(self.specs)

    def reset(self):
        """Forget warm starts so the next forward pass starts from the initial guesses."""
        self._warm = [None] * len(self.specs)

    def _solve(self, spec, theta, warm, fresh=False):
        """Warm solves stay at the working weight; fresh ones follow the barrier path down to it."""
        opts = replace(self.opts, warm_start=warm)
        if not spec.constrained:
            return solve_unconstrained(spec, theta, opts)
        target = self.gamma if self.strategy == "B" else self.constrained_gamma
        sched = default_schedule(target, start=max(1.0, target)) if fresh else [target]
        return solve_constrained(spec, theta, sched, opts)[0]

    def _fresh(self, spec, theta, guess):
        """Solve from the zero-control start and from ``guess``, keeping the best converged result."""
        found, err = [], None
        for start in ([guess] if guess is not None else []) + [None]:
            try:
                found.append(self._solve(spec, theta, start, fresh=True))
            except SolverError as e:
                err = e
        if not found:
            raise err
        return min(found, key=lambda res: (not res.converged, res.cost))

    def forward(self, theta) -> list:
        out = []
        for i, spec in enumerate(self.specs):
            res = None
            if self._warm[i] is not None:
                try:
                    res = self._solve(spec, theta, self._warm[i])
                except SolverError:
                    res = None
                if res is not None and not res.converged:
                    res = None  # warm start unusable: restart along the barrier path
            if res is None:
                res = self._fresh(spec, theta, self.initial_guess[i])
            out.append(res.trajectory)
        return out

    def commit(self, trajs):
        self._warm = [t.copy() for t in trajs]

    def backward(self, theta, trajs) -> list:
        grads = []
        for spec, traj in zip(self.specs, trajs):
            if not spec.constrained:
                aux = build_aux_unconstrained(spec, theta, traj)
            elif self.strategy in ("B", "C"):
                aux = build_aux_barrier(to_barrier(spec, self.gamma), theta, traj)
            else:
                mult = recover_multipliers(spec, theta, traj, self.constrained_gamma)
                active = identify_active(spec, theta, traj, self.delta)
                aux = build_aux_constrained(spec, theta, traj, mult, active)
            grads.append(solve_aux(aux))
        return grads

    def max_g(self, theta, trajs) -> float:
        vals = [constraint_report(s, theta, t).max_g for s, t in zip(self.specs, trajs)]
        return float(max(vals)) if vals else -np.inf


def outer_gradient(pipeline, task: TaskSpec, theta, epsilon: float, gamma: float = None,
                   strategy: str = None) -> np.ndarray:
    """Total derivative of the outer objective with respect to theta."""
    if isinstance(pipeline, ProblemSpec) or (isinstance(pipeline, (list, tuple)) and pipeline
                                             and isinstance(pipeline[0], ProblemSpec)):
        pipeline = SolverPipeline(pipeline, strategy or "B", gamma if gamma is not None else 1e-2)
    elif gamma is not None and hasattr(pipeline, "set_gamma"):
        pipeline.set_gamma(gamma)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    trajs = pipeline.forward(theta)
    grads = pipeline.backward(theta, trajs)
    return chain(task, trajs, grads, theta, epsilon)


_RECOVERABLE = (SolverError, DomainError, NonFiniteError, FloatingPointError)


def run(pipeline, task: TaskSpec, opts: OuterOptions, theta0) -> RunLog:
    """Safe gradient descent over the continuation ladder."""
    start = time.perf_counter()
    theta = np.atleast_1d(np.asarray(theta0, dtype=float)).copy()
    has_R = task.constraints is not None
    logbook = RunLog()
    it = 0
    for rung, (eps, gam) in enumerate(opts.ladder()):
        if hasattr(pipeline, "set_gamma"):
            pipeline.set_gamma(gam)
        trajs = pipeline.forward(theta)
        R = task.R(trajs, theta)
        if R.size and np.any(R >= 0):
            raise UnsafeInitialization(f"initial task constraints are not strictly negative (max R = {R.max():.6g})")
        if hasattr(pipeline, "commit"):
            pipeline.commit(trajs)
        W = outer_objective(task, trajs, theta, eps)
        grad = chain(task, trajs, pipeline.backward(theta, trajs), theta, eps)
        done = False
        for k in range(opts.max_iters + 1):
            gnorm = float(np.linalg.norm(grad))
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"outer gradient is not finite at iteration {it}")
            rec = dict(iter=it, rung=rung, epsilon=eps, gamma=gam, W=W, loss=float(task.loss(trajs, theta)),
                       max_R=float(R.max()) if R.size else -np.inf, max_g=pipeline.max_g(theta, trajs),
                       grad_norm=gnorm, theta=theta.copy())
            logbook.records.append(rec)
            if it == 0 or (opts.traj_every and it % opts.traj_every == 0):
                logbook.trajectories[it] = [t.copy() for t in trajs]
            log.debug("iter %d rung %d W=%.10g |g|=%.3g", it, rung, W, gnorm)
            if gnorm < opts.grad_tol:
                done = True
                break
            if k == opts.max_iters:
                break
            step = opts.lr
            last_err = None
            for _ in range(opts.max_halvings + 1):
                cand = theta - step * grad
                try:
                    ctrajs = pipeline.forward(cand)
                    cR = task.R(ctrajs, cand)
                    if (cR.size and np.any(cR >= 0)) or pipeline.max_g(cand, ctrajs) >= 0:
                        raise SafetyBreach("candidate left the strictly feasible region")
                    cW = outer_objective(task, ctrajs, cand, eps)
                    if not np.isfinite(cW):
                        raise NonFiniteError("outer objective is not finite")
                    # a candidate whose auxiliary system fails is rejected like a failed inner solve
                    cgrad = chain(task, ctrajs, pipeline.backward(cand, ctrajs), cand, eps)
                except _RECOVERABLE + (SafetyBreach,) as err:
                    last_err = err
                    step *= 0.5
                    continue
                break
            else:
                if isinstance(last_err, SafetyBreach):
                    raise SafetyBreach(f"iteration {it}: no safe step after {opts.max_halvings} halvings")
                raise SolverError(f"iteration {it}: inner solve failed after {opts.max_halvings} halvings ({last_err})")
            theta, trajs, R, W, grad = cand, ctrajs, cR, cW, cgrad
            if hasattr(pipeline, "commit"):
                pipeline.commit(trajs)
            it += 1
        logbook.converged.append(done)
        logbook.rung_theta.append(theta.copy())
        logbook.rung_loss.append(float(task.loss(trajs, theta)))
        it += 1
    logbook.trajectories[logbook.records[-1]["iter"]] = [t.copy() for t in trajs]
    logbook.theta = theta
    logbook.wall_clock = time.perf_counter() - start
    logbook.certify(constrained=has_R)
    return logbook
