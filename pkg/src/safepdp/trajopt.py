"""Forward-pass solvers.

``solve_unconstrained`` is an iterative LQR method.  Its backward pass tries
the exact Hessian of the stage Hamiltonian ``c + lam'f`` first, so it converges
quadratically near a minimizer, and falls back to the Gauss-Newton model with
Levenberg regularization on ``Quu`` when that step is unusable.  For barrier
problems the line search enforces a fraction-to-boundary rule on every
inequality before any barrier term is evaluated, which keeps every candidate
strictly feasible.

``solve_constrained`` follows a decreasing barrier-weight path with warm
starts and recovers multipliers at the final weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .barrier import BarrierSpec, recover_multipliers, to_barrier
from .deriv import HyperDual, evaluate, expand
from .errors import DomainError, InfeasibleStart, NonFiniteError, NonPositiveCurvature
from .ocp import (Multipliers, ProblemSpec, Trajectory, _terminal_points, _theta,
                  constraint_report, rollout)

log = logging.getLogger(__name__)

MU_MAX = 1e8
ARMIJO = 1e-4
STALL_STEPS = 5  # stop after this many roundoff-level steps in a row


@dataclass(frozen=True)
class SolveOptions:
    max_iters: int = 200
    tol_grad: float = 1e-8
    reg_init: float = 1e-6
    ftb_tau: float = 0.995
    warm_start: Optional[Trajectory] = None
    gauss_newton: bool = False
    min_step: float = 1e-12

    def __post_init__(self):
        if not self.tol_grad > 0:
            raise ValueError("tol_grad must be positive")
        if not 0 < self.ftb_tau < 1:
            raise ValueError("ftb_tau must lie in (0, 1)")


@dataclass
class SolveResult:
    trajectory: Trajectory
    cost: float
    iters: int
    converged: bool
    stationarity: float
    max_g: float = -np.inf
    trace: Optional[list] = None  # per-iteration (cost, stationarity, max_g)


class _Smooth:
    """Uniform view of a plain or barrier problem for the solver."""

    def __init__(self, problem: Union[ProblemSpec, BarrierSpec]):
        if isinstance(problem, BarrierSpec):
            self.base = problem.base
            self.barrier = problem
            self.spec = problem.as_problem()
        else:
            if problem.constrained:
                raise ValueError(f"{problem.name} has constraints; wrap it with to_barrier first")
            self.base = problem
            self.barrier = None
            self.spec = problem

    def constraints(self, theta, traj):
        """All inequality values flattened, or None for unconstrained problems."""
        if self.barrier is None or not (self.base.q or self.base.qT):
            return None
        rep = constraint_report(self.base, theta, traj)
        return np.concatenate([rep.g.ravel(), rep.gT])

    def cost(self, theta, traj) -> float:
        s = self.spec
        c = evaluate(s.stage_cost, traj.states[:-1], traj.controls, theta, name=f"{s.name}.stage_cost")
        cT = evaluate(s.term_fn("cost"), *_terminal_points(traj), theta, name=f"{s.name}.final_cost")
        return float(np.sum(c) + cT[0, 0])


def _expand_all(sm: _Smooth, theta, traj: Trajectory, gauss_newton: bool):
    """Costates, stationarity and quadratic models along ``traj``.

    ``gn`` holds the cost Hessians alone; ``exact`` adds the costate-weighted
    dynamics curvature, i.e. the Hessian of the Hamiltonian.
    """
    s = sm.spec
    X, U = traj.states[:-1], traj.controls
    n = s.n

    def fc(x, u, th):
        f = s.dynamics(x, u, th)
        return np.concatenate([np.atleast_1d(np.asarray(f, dtype=object)),
                               np.atleast_1d(np.asarray(s.stage_cost(x, u, th), dtype=object))])

    fc.__name__ = f"{s.name}.dynamics+cost"
    second = (("x", "x"), ("x", "u"), ("u", "u"))
    e = expand(fc, X, U, theta, first=("x", "u"), second=second, name=fc.__name__)
    fx, fu = e.jac["x"][:, :n], e.jac["u"][:, :n]
    cx, cu = e.jac["x"][:, n], e.jac["u"][:, n]
    eT = expand(s.term_fn("cost"), *_terminal_points(traj), theta, first=("x",), second=(("x", "x"),),
                name=f"{s.name}.final_cost")
    lam = np.zeros((s.T, n))  # lam[t] = lambda_{t+1}
    lam[-1] = eT.jac["x"][0, 0]
    for t in range(s.T - 1, 0, -1):
        lam[t - 1] = cx[t] + fx[t].T @ lam[t]
    Hu = cu + np.einsum("tij,ti->tj", fu, lam)
    gn = tuple(e.hess[k][:, n] for k in second)
    exact = None
    if not gauss_newton:
        exact = tuple(h + np.einsum("ti,tijk->tjk", lam, e.hess[k][:, :n]) for h, k in zip(gn, second))
    return dict(fx=fx, fu=fu, cx=cx, cu=cu, gn=gn, exact=exact, Vx=eT.jac["x"][0, 0],
                Vxx=eT.hess[("x", "x")][0, 0], lam=lam, Hu=Hu)


def _backward(d, hess, mu):
    Hxx, Hxu, Huu = hess
    T = d["fx"].shape[0]
    Vx, Vxx = d["Vx"], d["Vxx"]
    ks, Ks = [None] * T, [None] * T
    dv1 = dv2 = 0.0
    for t in range(T - 1, -1, -1):
        fx, fu = d["fx"][t], d["fu"][t]
        Qx = d["cx"][t] + fx.T @ Vx
        Qu = d["cu"][t] + fu.T @ Vx
        VxxFu = Vxx @ fu
        Qxx = Hxx[t] + fx.T @ Vxx @ fx
        Quu = Huu[t] + fu.T @ VxxFu
        Qux = Hxu[t].T + VxxFu.T @ fx
        Quu = 0.5 * (Quu + Quu.T)
        m = Quu.shape[0]
        try:
            cf = cho_factor(Quu + mu * np.eye(m))
        except LinAlgError:
            return None
        k = -cho_solve(cf, Qu)
        K = -cho_solve(cf, Qux)
        ks[t], Ks[t] = k, K
        dv1 += k @ Qu
        dv2 += 0.5 * k @ Quu @ k
        Vx = Qx + K.T @ Quu @ k + K.T @ Qu + Qux.T @ k
        Vxx = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
        Vxx = 0.5 * (Vxx + Vxx.T)
    return np.array(ks), np.array(Ks), dv1, dv2


def _forward(sm: _Smooth, theta, traj, ks, Ks, alpha):
    s = sm.spec
    xs = np.empty_like(traj.states)
    us = np.empty_like(traj.controls)
    xs[0] = traj.states[0]
    with np.errstate(all="ignore"):
        for t in range(s.T):
            us[t] = traj.controls[t] + alpha * ks[t] + Ks[t] @ (xs[t] - traj.states[t])
            xs[t + 1] = np.asarray(s.dynamics(xs[t], us[t], theta), dtype=float)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
        return None
    return Trajectory(xs, us)


def _feasible_step(g_old, g_new, tau):
    if g_old is None:
        return True
    return bool(np.all(g_new < 0) and np.all(-g_new >= (1.0 - tau) * (-g_old)))


def _line_search(sm, theta, traj, J, g, bw, mu, opts):
    ks, Ks, dv1, dv2 = bw
    alpha = 1.0
    while alpha >= opts.min_step:
        cand = _forward(sm, theta, traj, ks, Ks, alpha)
        if cand is not None:
            g_new = sm.constraints(theta, cand)
            # fraction-to-boundary test runs before any barrier term is evaluated
            if _feasible_step(g, g_new, opts.ftb_tau):
                try:
                    J_new = sm.cost(theta, cand)
                except (DomainError, NonFiniteError):
                    J_new = np.inf
                expected = alpha * dv1 + alpha * alpha * dv2
                if J_new - J <= ARMIJO * expected:
                    return cand, J_new, g_new
                # at the roundoff floor a full, unregularized Newton step is accepted
                noise = 1e-12 * (1.0 + abs(J))
                if alpha == 1.0 and mu <= 1e-6 and -expected <= noise and J_new - J <= noise:
                    return cand, J_new, g_new
        alpha *= 0.5
    return None


def solve_unconstrained(problem: Union[ProblemSpec, BarrierSpec], theta, opts: SolveOptions = SolveOptions(),
                        record: bool = False) -> SolveResult:
    """Iterative LQR on a plain unconstrained or barrier problem.

    Each iteration first tries a step from the exact Hamiltonian Hessian; if
    that model is not positive definite or its line search fails, it falls back
    to the Gauss-Newton model with Levenberg escalation.
    """
    sm = _Smooth(problem)
    s = sm.spec
    theta = _theta(s, theta)
    init_u = opts.warm_start.controls if opts.warm_start is not None else np.zeros((s.T, s.m))
    traj = rollout(s, theta, init_u)
    g = sm.constraints(theta, traj)
    if g is not None and g.size and g.max() >= 0:
        raise InfeasibleStart(f"{sm.base.name}: initial guess violates inequalities (max g = {g.max():.6g})")
    J = sm.cost(theta, traj)
    mu = opts.reg_init
    trace = [] if record else None
    it = 0
    converged = False
    flat = 0  # consecutive steps whose cost change is at the roundoff level
    while True:
        d = _expand_all(sm, theta, traj, opts.gauss_newton)
        stat = float(np.abs(d["Hu"]).max()) if s.m else 0.0
        if record:
            trace.append((J, stat, _maxg(g)))
        if stat <= opts.tol_grad:
            converged = True
            break
        if it >= opts.max_iters or flat >= STALL_STEPS:
            break
        it += 1
        found = None
        if d["exact"] is not None:
            bw = _backward(d, d["exact"], mu)
            if bw is not None:
                found = _line_search(sm, theta, traj, J, g, bw, mu, opts)
        while found is None:
            bw = _backward(d, d["gn"], mu)
            if bw is not None:
                found = _line_search(sm, theta, traj, J, g, bw, mu, opts)
                if found is not None:
                    break
            mu *= 10.0
            if mu > MU_MAX:
                if bw is None:
                    raise NonPositiveCurvature(f"{s.name}: Quu not positive definite at regularization {MU_MAX:g}")
                log.debug("%s: line search failed at stationarity %.3g", s.name, stat)
                return SolveResult(traj, J, it, False, stat, _maxg(g), trace)
        flat = flat + 1 if abs(found[1] - J) <= 1e-12 * (1.0 + abs(J)) else 0
        traj, J, g = found
        mu = max(mu / 10.0, 1e-12)
    return SolveResult(traj, J, it, converged, stat, _maxg(g), trace)


def _maxg(g):
    return float(g.max()) if g is not None and g.size else -np.inf


def default_schedule(final_gamma: float, start: float = 1.0) -> list:
    """Geometric factor-10 ladder from ``start`` down to ``final_gamma``."""
    out = [start]
    while out[-1] > final_gamma * (1 + 1e-9):
        out.append(out[-1] / 10.0)
    out[-1] = final_gamma
    return out


def solve_constrained(spec: ProblemSpec, theta, gamma_schedule: Sequence[float],
                      opts: SolveOptions = SolveOptions()) -> tuple[SolveResult, Multipliers]:
    gammas = [float(g) for g in gamma_schedule]
    if not gammas:
        raise ValueError("gamma_schedule must be nonempty")
    if any(g <= 0 for g in gammas) or any(b >= a for a, b in zip(gammas, gammas[1:])):
        raise ValueError("gamma_schedule must be positive and strictly decreasing")
    theta = _theta(spec, theta)
    if not spec.constrained:
        res = solve_unconstrained(spec, theta, opts)
        return res, recover_multipliers(spec, theta, res.trajectory, gammas[-1])
    res = None
    warm = opts.warm_start
    for gamma in gammas:
        res = solve_unconstrained(to_barrier(spec, gamma), theta, replace(opts, warm_start=warm))
        warm = res.trajectory
        log.debug("%s: gamma=%g iters=%d stationarity=%.3g", spec.name, gamma, res.iters, res.stationarity)
    return res, recover_multipliers(spec, theta, res.trajectory, gammas[-1])
