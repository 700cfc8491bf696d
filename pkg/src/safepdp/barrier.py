"""Barrier reformulation of a constrained system and multiplier recovery.

Inequalities enter the cost as ``-gamma * sum(ln(-g))`` and equalities as
``(1 / (2 gamma)) * sum(h**2)``, leaving only the dynamics as constraints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .deriv import HyperDual
from .errors import DomainError
from .ocp import (Multipliers, ProblemSpec, Trajectory, _theta, constraint_report,
                  costates)


def _values(g):
    return [gi.value if isinstance(gi, HyperDual) else np.asarray(gi, dtype=float) for gi in g]


def _barrier_terms(g, h, gamma, where):
    out = 0.0
    for gi, val in zip(g, _values(g)):
        if np.any(val >= 0) or np.any(np.isnan(val)):
            raise DomainError(f"{where}: inequality value {np.max(val):.6g} is not strictly negative")
        out = out - gamma * np.log(-gi)
    for hi in h:
        out = out + (0.5 / gamma) * (hi * hi)
    return out


@dataclass(frozen=True)
class BarrierSpec:
    """Unconstrained approximation of ``base`` with barrier weight ``gamma``."""

    base: ProblemSpec
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @property
    def name(self):
        return f"{self.base.name}[gamma={self.gamma:g}]"

    def stage_cost(self, x, u, th):
        b = self.base
        g = np.atleast_1d(b.path_ineq(x, u, th)) if b.q else ()
        h = np.atleast_1d(b.path_eq(x, u, th)) if b.s else ()
        return b.stage_cost(x, u, th) + _barrier_terms(g, h, self.gamma, f"{b.name}.path_ineq")

    def final_cost(self, x, th):
        b = self.base
        g = np.atleast_1d(b.term_ineq(x, th)) if b.qT else ()
        h = np.atleast_1d(b.term_eq(x, th)) if b.sT else ()
        return b.final_cost(x, th) + _barrier_terms(g, h, self.gamma, f"{b.name}.term_ineq")

    def as_problem(self) -> ProblemSpec:
        """The composite problem with only dynamics constraints left."""
        b = self.base
        return ProblemSpec(b.n, b.m, b.r, b.T, b.dynamics, b.initial_state,
                           self.stage_cost, self.final_cost, name=self.name, theta_names=b.theta_names)


def to_barrier(spec: ProblemSpec, gamma: float) -> BarrierSpec:
    return BarrierSpec(spec, float(gamma))


def recover_multipliers(spec: ProblemSpec, theta, traj: Trajectory, gamma: float) -> Multipliers:
    """Closed-form multipliers ``v = -gamma / g`` and ``w = h / gamma`` plus costates."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    theta = _theta(spec, theta)
    rep = constraint_report(spec, theta, traj)
    if rep.max_g >= 0:
        raise DomainError(f"{spec.name}: trajectory is not strictly feasible (max g = {rep.max_g:.6g})")
    v = -gamma / rep.g
    w = rep.h / gamma
    vT = -gamma / rep.gT
    wT = rep.hT / gamma
    lam = costates(spec, theta, traj, v, w, vT, wT)
    return Multipliers(lam, v, w, vT, wT)
