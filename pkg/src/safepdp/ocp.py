"""Parameterized constrained optimal-control systems and their evaluators.

A system is described by dynamics ``x' = f(x, u, theta)``, an initial state
``x0(theta)``, stage and final costs, and path/terminal inequality (``g <= 0``)
and equality (``h = 0``) constraints.  All user functions follow the calling
convention of :mod:`safepdp.deriv`: stage functions take ``(x, u, theta)`` and
terminal functions take ``(x, theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .deriv import HyperDual, evaluate, expand
from .errors import NonFiniteError

DEFAULT_DELTA = 1e-3


def _none(*_):
    return np.zeros(0)


def _probe_dim(fn, args):
    with np.errstate(all="ignore"):
        out = fn(*args)
    return int(np.atleast_1d(np.asarray(out, dtype=object)).size)


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable description of a parameterized optimal-control system.

    Constraint dimensions are taken as constant over the path and are probed
    once at construction.
    """

    n: int
    m: int
    r: int
    T: int
    dynamics: Callable
    initial_state: Callable
    stage_cost: Callable
    final_cost: Callable = lambda x, theta: 0.0
    path_ineq: Callable = _none
    path_eq: Callable = _none
    term_ineq: Callable = _none
    term_eq: Callable = _none
    name: str = "problem"
    theta_names: tuple = ()
    q: int = field(init=False)
    s: int = field(init=False)
    qT: int = field(init=False)
    sT: int = field(init=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("horizon T must be >= 1")
        if min(self.n, self.m, self.r) < 0:
            raise ValueError("dimensions must be non-negative")
        x, u, th = np.zeros(self.n), np.zeros(self.m), np.zeros(self.r)
        object.__setattr__(self, "q", _probe_dim(self.path_ineq, (x, u, th)))
        object.__setattr__(self, "s", _probe_dim(self.path_eq, (x, u, th)))
        object.__setattr__(self, "qT", _probe_dim(self.term_ineq, (x, th)))
        object.__setattr__(self, "sT", _probe_dim(self.term_eq, (x, th)))

    @property
    def constrained(self) -> bool:
        return (self.q + self.s + self.qT + self.sT) > 0

    # terminal functions lifted to the (x, u, theta) convention
    def term_fn(self, which: str) -> Callable:
        fn = {"cost": self.final_cost, "ineq": self.term_ineq, "eq": self.term_eq}[which]
        return lambda x, u, th: fn(x, th)


@dataclass
class Trajectory:
    states: np.ndarray   # (T+1, n)
    controls: np.ndarray  # (T, m)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.ndim == 1:
            self.controls = self.controls[:, None]
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError(f"need |states| = |controls| + 1, got {self.states.shape[0]} and {self.controls.shape[0]}")

    @property
    def T(self) -> int:
        return self.controls.shape[0]

    def flat(self) -> np.ndarray:
        """Stacked vector xi = (x_0..x_T, u_0..u_{T-1})."""
        return np.concatenate([self.states.ravel(), self.controls.ravel()])

    def copy(self) -> "Trajectory":
        return Trajectory(self.states.copy(), self.controls.copy())


@dataclass
class Multipliers:
    costates: np.ndarray  # (T, n): lambda_1..lambda_T
    v: np.ndarray         # (T, q)
    w: np.ndarray         # (T, s)
    vT: np.ndarray        # (qT,)
    wT: np.ndarray        # (sT,)


@dataclass
class ActiveSet:
    path: list            # T index arrays, one per stage
    terminal: np.ndarray  # active terminal indices
    delta: float

    def count(self) -> int:
        return int(sum(len(a) for a in self.path) + len(self.terminal))


class ConstraintReport(NamedTuple):
    g: np.ndarray     # (T, q)
    h: np.ndarray     # (T, s)
    gT: np.ndarray    # (qT,)
    hT: np.ndarray    # (sT,)
    max_g: float      # -inf when there are no inequalities
    max_abs_h: float  # 0 when there are no equalities


class CpmpResidual(NamedTuple):
    stationarity: float
    costate: float
    complementarity: float        # max over t of sum_i |v_ti g_ti|
    complementarity_total: float  # sum over all t, i
    primal: float
    dual: float


def _theta(spec: ProblemSpec, theta) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.size != spec.r:
        raise ValueError(f"{spec.name}: theta has {theta.size} entries, expected {spec.r}")
    return theta


def initial_state(spec: ProblemSpec, theta) -> np.ndarray:
    x0 = np.asarray(spec.initial_state(_theta(spec, theta)), dtype=float).ravel()
    if x0.size != spec.n:
        raise ValueError(f"{spec.name}: initial state has {x0.size} entries, expected {spec.n}")
    return x0


def rollout(spec: ProblemSpec, theta, controls) -> Trajectory:
    theta = _theta(spec, theta)
    controls = np.asarray(controls, dtype=float).reshape(spec.T, spec.m)
    xs = np.empty((spec.T + 1, spec.n))
    xs[0] = initial_state(spec, theta)
    with np.errstate(all="ignore"):
        for t in range(spec.T):
            xs[t + 1] = np.asarray(spec.dynamics(xs[t], controls[t], theta), dtype=float)
            if not np.all(np.isfinite(xs[t + 1])):
                raise NonFiniteError(f"{spec.name}: rollout diverged at time step {t + 1}")
    return Trajectory(xs, controls)


def _terminal_points(traj: Trajectory):
    return traj.states[-1:], np.zeros((1, 0))


def total_cost(spec: ProblemSpec, theta, traj: Trajectory) -> float:
    theta = _theta(spec, theta)
    c = evaluate(spec.stage_cost, traj.states[:-1], traj.controls, theta, name=f"{spec.name}.stage_cost")
    cT = evaluate(spec.term_fn("cost"), *_terminal_points(traj), theta, name=f"{spec.name}.final_cost")
    return float(np.sum(c) + cT[0, 0])


def constraint_report(spec: ProblemSpec, theta, traj: Trajectory) -> ConstraintReport:
    theta = _theta(spec, theta)
    X, U = traj.states[:-1], traj.controls
    xT, uT = _terminal_points(traj)
    g = evaluate(spec.path_ineq, X, U, theta, name=f"{spec.name}.path_ineq") if spec.q else np.zeros((spec.T, 0))
    h = evaluate(spec.path_eq, X, U, theta, name=f"{spec.name}.path_eq") if spec.s else np.zeros((spec.T, 0))
    gT = evaluate(spec.term_fn("ineq"), xT, uT, theta)[0] if spec.qT else np.zeros(0)
    hT = evaluate(spec.term_fn("eq"), xT, uT, theta)[0] if spec.sT else np.zeros(0)
    gs = np.concatenate([g.ravel(), gT])
    hs = np.concatenate([h.ravel(), hT])
    max_g = float(gs.max()) if gs.size else -np.inf
    max_h = float(np.abs(hs).max()) if hs.size else 0.0
    return ConstraintReport(g, h, gT, hT, max_g, max_h)


def _hd_const(col):
    return HyperDual(np.asarray(col, dtype=float))


def hamiltonian(spec: ProblemSpec, lam_next, v, w) -> Callable:
    """Batched stage Hamiltonian ``c + lam'f + v'g + w'h`` (one row of multipliers per step)."""
    lam_next, v, w = (np.atleast_2d(a) for a in (lam_next, v, w))

    def L(x, u, th):
        out = spec.stage_cost(x, u, th)
        f = spec.dynamics(x, u, th)
        for i in range(spec.n):
            out = out + _hd_const(lam_next[:, i]) * f[i]
        if spec.q:
            g = spec.path_ineq(x, u, th)
            for i in range(spec.q):
                out = out + _hd_const(v[:, i]) * g[i]
        if spec.s:
            h = spec.path_eq(x, u, th)
            for i in range(spec.s):
                out = out + _hd_const(w[:, i]) * h[i]
        return out

    L.__name__ = f"{spec.name}.hamiltonian"
    return L


def terminal_hamiltonian(spec: ProblemSpec, vT, wT) -> Callable:
    vT, wT = np.atleast_1d(vT), np.atleast_1d(wT)

    def LT(x, u, th):
        out = spec.final_cost(x, th)
        if spec.qT:
            g = spec.term_ineq(x, th)
            for i in range(spec.qT):
                out = out + vT[i] * g[i]
        if spec.sT:
            h = spec.term_eq(x, th)
            for i in range(spec.sT):
                out = out + wT[i] * h[i]
        return out

    LT.__name__ = f"{spec.name}.terminal_hamiltonian"
    return LT


def costates(spec: ProblemSpec, theta, traj: Trajectory, v, w, vT, wT) -> np.ndarray:
    """Backward recursion lam_T = L_T^x, lam_t = L_t^x for the given constraint multipliers."""
    theta = _theta(spec, theta)
    X, U = traj.states[:-1], traj.controls
    eT = expand(terminal_hamiltonian(spec, vT, wT), *_terminal_points(traj), theta, first=("x",))
    cx = expand(spec.stage_cost, X, U, theta, first=("x",), name=f"{spec.name}.stage_cost").jac["x"][:, 0]
    fx = expand(spec.dynamics, X, U, theta, first=("x",), name=f"{spec.name}.dynamics").jac["x"]
    gx = expand(spec.path_ineq, X, U, theta, first=("x",)).jac["x"] if spec.q else np.zeros((spec.T, 0, spec.n))
    hx = expand(spec.path_eq, X, U, theta, first=("x",)).jac["x"] if spec.s else np.zeros((spec.T, 0, spec.n))
    lam = np.zeros((spec.T, spec.n))
    lam[-1] = eT.jac["x"][0, 0]
    for t in range(spec.T - 1, 0, -1):
        lam[t - 1] = cx[t] + fx[t].T @ lam[t] + gx[t].T @ v[t] + hx[t].T @ w[t]
    return lam


def cpmp_residual(spec: ProblemSpec, theta, traj: Trajectory, mult: Multipliers) -> CpmpResidual:
    theta = _theta(spec, theta)
    X, U = traj.states[:-1], traj.controls
    L = expand(hamiltonian(spec, mult.costates, mult.v, mult.w), X, U, theta, first=("x", "u"))
    LT = expand(terminal_hamiltonian(spec, mult.vT, mult.wT), *_terminal_points(traj), theta, first=("x",))
    stat = float(np.abs(L.jac["u"]).max()) if spec.m else 0.0
    res = [np.abs(mult.costates[-1] - LT.jac["x"][0, 0])]
    for t in range(1, spec.T):
        res.append(np.abs(mult.costates[t - 1] - L.jac["x"][t, 0]))
    cost_res = float(np.max(np.concatenate(res))) if spec.n else 0.0
    rep = constraint_report(spec, theta, traj)
    vg = np.abs(mult.v * rep.g)
    vgT = np.abs(mult.vT * rep.gT)
    per_step = np.concatenate([vg.sum(axis=1), [vgT.sum()]])
    primal = max(max(rep.max_g, 0.0), rep.max_abs_h)
    vs = np.concatenate([mult.v.ravel(), mult.vT])
    dual = float(max(-vs.min(), 0.0)) if vs.size else 0.0
    return CpmpResidual(stat, cost_res, float(per_step.max()), float(per_step.sum()), float(primal), dual)


def identify_active(spec: ProblemSpec, theta, traj: Trajectory, delta: float = DEFAULT_DELTA) -> ActiveSet:
    if not delta > 0:
        raise ValueError("delta must be positive")
    rep = constraint_report(spec, theta, traj)
    path = [np.flatnonzero(rep.g[t] >= -delta) for t in range(spec.T)]
    return ActiveSet(path, np.flatnonzero(rep.gT >= -delta), float(delta))
