"""Barrier accuracy sweep and backward-pass timing."""

from __future__ import annotations

import time
import timeit
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .auxsys import build_aux_barrier, build_aux_constrained, build_aux_unconstrained, solve_aux
from .barrier import to_barrier
from .envs import EnvConfig, make_env
from .ocp import identify_active, rollout
from .trajopt import SolveOptions, default_schedule, solve_constrained, solve_unconstrained


@dataclass
class SweepRow:
    gamma: float
    rel_traj_error: float
    rel_grad_error: float
    solve_time: float


def _reference(spec, theta, gamma_ref, opts):
    res, _ = solve_constrained(spec, theta, default_schedule(gamma_ref), opts)
    return res.trajectory


def reference_gradient(spec, theta, gamma_ref: float = 1e-6, h: float = 1e-5,
                       opts: Optional[SolveOptions] = None, interior_gamma: float = 1e-2) -> np.ndarray:
    """Central finite differences of the constrained solution, shape (len(flat), r).

    Perturbed solves warm-start from an interior solution at ``interior_gamma``
    (a reference on the boundary would be infeasible after perturbation) and
    then follow the ladder down to ``gamma_ref``.
    """
    opts = opts or SolveOptions(max_iters=300, tol_grad=1e-9)
    theta = np.asarray(theta, dtype=float)
    warm = _reference(spec, theta, interior_gamma, opts)
    o = replace(opts, warm_start=warm)
    sched = default_schedule(gamma_ref, start=interior_gamma)
    cols = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        plus = solve_constrained(spec, theta + e, sched, o)[0].trajectory.flat()
        minus = solve_constrained(spec, theta - e, sched, o)[0].trajectory.flat()
        cols.append((plus - minus) / (2 * h))
    return np.stack(cols, axis=1)


def gamma_sweep(env, gammas: Sequence[float], gamma_ref: float = 1e-6, with_grad: bool = True,
                opts: Optional[SolveOptions] = None) -> list:
    """Accuracy of the barrier solution and its gradient against the constrained reference."""
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise ValueError("gammas must be nonempty")
    if isinstance(env, EnvConfig):
        spec, theta = make_env(env), env.theta_true()
    else:
        spec, theta = env
    opts = opts or SolveOptions(max_iters=300, tol_grad=1e-9)
    ref = _reference(spec, theta, gamma_ref, opts)
    ref_flat = ref.flat()
    ref_grad = reference_gradient(spec, theta, gamma_ref, opts=opts) if with_grad else None
    rows = []
    for gamma in sorted(gammas, reverse=True):
        start = time.perf_counter()
        # each gamma follows its own ladder so the result does not depend on the sweep order
        res = solve_constrained(spec, theta, default_schedule(gamma, start=max(1.0, gamma)), opts)[0]
        elapsed = time.perf_counter() - start
        traj = res.trajectory
        err = float(np.linalg.norm(traj.flat() - ref_flat) / np.linalg.norm(ref_flat))
        gerr = float("nan")
        if with_grad:
            G = solve_aux(build_aux_barrier(to_barrier(spec, gamma), theta, traj)).flat()
            gerr = float(np.linalg.norm(G - ref_grad) / np.linalg.norm(ref_grad))
        rows.append(SweepRow(gamma, err, gerr, elapsed))
    order = {g: i for i, g in enumerate(gammas)}
    return sorted(rows, key=lambda r: order[r.gamma])


@dataclass
class TimingResult:
    horizons: list
    times: list
    slope: float  # nan when the horizons do not determine a fit


def loglog_slope(xs, ys) -> float:
    xs, ys = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    if len(np.unique(xs)) < 2:
        return float("nan")
    return float(np.polyfit(xs, ys, 1)[0])


def timing(cfg: EnvConfig, horizons: Sequence[int], gamma: float = 1e-2, repeats: int = 20) -> TimingResult:
    """Best-of-``repeats`` wall clock of ``solve_aux`` for each horizon, after one warm-up call."""
    horizons = [int(T) for T in horizons]
    if len(horizons) < 2:
        raise ValueError("timing needs at least two horizons")
    times = []
    for T in horizons:
        spec = make_env(EnvConfig(**{**cfg.to_dict(), "T": T}))
        theta = cfg.theta_true()
        traj = rollout(spec, theta, np.zeros((T, spec.m)))
        aux = build_aux_barrier(to_barrier(spec, gamma), theta, traj)
        solve_aux(aux)
        # timeit switches off garbage collection while measuring
        times.append(min(timeit.repeat(lambda: solve_aux(aux), repeat=repeats, number=1)))
    return TimingResult(horizons, times, loglog_slope(horizons, times))


@dataclass
class GradCheck:
    rel_error: float
    seconds: float
    r: int


def gradcheck(cfg: EnvConfig, gamma: float = 1e-2, h: float = 1e-5, strategy: str = "B",
              opts: Optional[SolveOptions] = None, constrained_gamma: float = 1e-8) -> GradCheck:
    """Trajectory gradient from the auxiliary system against central finite differences.

    Strategy ``B`` differentiates the barrier solution at ``gamma``.  Strategy
    ``A`` differentiates the constrained solution through the active-set
    auxiliary system, checked against a constrained solve at ``constrained_gamma``.
    """
    if strategy not in ("A", "B"):
        raise ValueError("gradcheck strategy must be 'A' or 'B'")
    start = time.perf_counter()
    opts = opts or SolveOptions(max_iters=300, tol_grad=1e-11)
    spec, theta = make_env(cfg), cfg.theta_true()
    if strategy == "A" and spec.constrained:
        interior = solve_constrained(spec, theta, default_schedule(gamma), opts)[0].trajectory
        sched = default_schedule(constrained_gamma, start=gamma)

        def solve(th):
            return solve_constrained(spec, th, sched, replace(opts, warm_start=interior))

        center, mult = solve(theta)
        center = center.trajectory
        aux = build_aux_constrained(spec, theta, center, mult, identify_active(spec, theta, center))
        G = solve_aux(aux).flat()

        def fd_solve(th):
            return solve(th)[0].trajectory.flat()
    else:
        problem = to_barrier(spec, gamma) if spec.constrained else spec
        center = solve_unconstrained(problem, theta, opts).trajectory
        if spec.constrained:
            aux = build_aux_barrier(problem, theta, center)
        else:
            aux = build_aux_unconstrained(spec, theta, center)
        G = solve_aux(aux).flat()
        warm = replace(opts, warm_start=center)

        def fd_solve(th):
            return solve_unconstrained(problem, th, warm).trajectory.flat()
    fd = np.empty_like(G)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[:, i] = (fd_solve(theta + e) - fd_solve(theta - e)) / (2 * h)
    err = float(np.linalg.norm(G - fd) / np.linalg.norm(fd))
    return GradCheck(err, time.perf_counter() - start, theta.size)
