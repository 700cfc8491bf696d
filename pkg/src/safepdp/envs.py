"""Benchmark environments: pendulum, cartpole and a planar two-link arm.

Each environment has a full parameter vector laid out as
``[dynamics..., cost weights..., constraint bounds...]``.  A learnable mask
selects which of those entries form the ``theta`` of the generated
:class:`~safepdp.ocp.ProblemSpec`; the remaining entries are fixed at their
configured values.

Continuous dynamics are discretized with forward Euler.  The stage cost is
``|u|^2 + sum_i w_i (x_i - goal_i)^2`` and the final cost is the same state
term.  Control bounds are either a per-component box (``norm = "inf"``) or a
Euclidean ball (``norm = "2"``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import ConfigError
from .ocp import ProblemSpec, Trajectory
from .trajopt import SolveOptions, default_schedule, solve_constrained

GRAVITY = 10.0


@dataclass(frozen=True)
class EnvTemplate:
    n: int
    m: int
    dyn: tuple          # names of dynamics parameters
    nominal: dict       # default values for every parameter
    x0: tuple
    x_goal: tuple
    positive: tuple     # parameters that must be > 0
    has_xmax: bool = False


_STATE_W = {
    "pendulum": ("w_q", "w_dq"),
    "cartpole": ("w_x", "w_q", "w_dx", "w_dq"),
    "twolink": ("w_q1", "w_q2", "w_dq1", "w_dq2"),
}

TEMPLATES = {
    "pendulum": EnvTemplate(
        n=2, m=1, dyn=("mass", "length", "damping"),
        nominal=dict(mass=1.0, length=1.0, damping=0.05, w_q=10.0, w_dq=1.0, u_max=3.0),
        x0=(0.0, 0.0), x_goal=(np.pi, 0.0), positive=("mass", "length", "u_max")),
    "cartpole": EnvTemplate(
        n=4, m=1, dyn=("cart_mass", "pole_mass", "pole_length"),
        nominal=dict(cart_mass=1.0, pole_mass=0.1, pole_length=1.0,
                     w_x=1.0, w_q=6.0, w_dx=0.1, w_dq=0.1, x_max=1.0, u_max=4.0),
        x0=(0.0, 0.0, 0.0, 0.0), x_goal=(0.0, np.pi, 0.0, 0.0),
        positive=("cart_mass", "pole_mass", "pole_length", "x_max", "u_max"), has_xmax=True),
    "twolink": EnvTemplate(
        n=4, m=2, dyn=("length1", "length2", "mass1", "mass2"),
        nominal=dict(length1=1.0, length2=1.0, mass1=1.0, mass2=1.0,
                     w_q1=1.0, w_q2=1.0, w_dq1=0.1, w_dq2=0.1, u_max=2.0),
        x0=(0.0, 0.0, 0.0, 0.0), x_goal=(np.pi / 2, 0.0, 0.0, 0.0),
        positive=("length1", "length2", "mass1", "mass2", "u_max")),
}


def param_names(env_id: str) -> tuple:
    """Full parameter layout ``[dyn, obj, cstr]`` of an environment."""
    tpl = _template(env_id)
    cstr = ("x_max", "u_max") if tpl.has_xmax else ("u_max",)
    return tpl.dyn + _STATE_W[env_id] + cstr


def _template(env_id: str) -> EnvTemplate:
    if env_id not in TEMPLATES:
        raise ConfigError(f"unknown env_id {env_id!r}; choose from {sorted(TEMPLATES)}")
    return TEMPLATES[env_id]


@dataclass
class EnvConfig:
    env_id: str
    dt: float = 0.1
    T: int = 50
    x_goal: Optional[list] = None
    x0: Optional[list] = None
    true_params: dict = field(default_factory=dict)
    learnable: Optional[list] = None   # names of learnable entries; default: dynamics + cost weights
    norm: str = "inf"
    demo_x0_spread: float = 0.0
    demo_gamma: float = 1e-4
    demo_noise: float = 0.0

    def __post_init__(self):
        tpl = _template(self.env_id)
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError("T must be a positive integer")
        self.T = int(self.T)
        if self.norm not in ("inf", "2"):
            raise ConfigError("norm must be 'inf' or '2'")
        names = param_names(self.env_id)
        unknown = set(self.true_params) - set(names)
        if unknown:
            raise ConfigError(f"unknown parameters for {self.env_id}: {sorted(unknown)}")
        for key in ("x_goal", "x0"):
            val = getattr(self, key)
            if val is not None and len(val) != tpl.n:
                raise ConfigError(f"{key} must have {tpl.n} entries")
        bad = set(self.learnable or ()) - set(names)
        if bad:
            raise ConfigError(f"unknown learnable parameters: {sorted(bad)}")
        params = self.params
        for p in tpl.positive:
            if not params[p] > 0:
                raise ConfigError(f"parameter {p} must be positive, got {params[p]}")

    @property
    def params(self) -> dict:
        out = dict(_template(self.env_id).nominal)
        out.update({k: float(v) for k, v in self.true_params.items()})
        return out

    @property
    def learnable_names(self) -> tuple:
        if self.learnable is None:
            return _template(self.env_id).dyn + _STATE_W[self.env_id]
        order = param_names(self.env_id)
        return tuple(n for n in order if n in set(self.learnable))

    @property
    def learnable_mask(self) -> np.ndarray:
        learn = set(self.learnable_names)
        return np.array([n in learn for n in param_names(self.env_id)])

    def theta_true(self) -> np.ndarray:
        p = self.params
        return np.array([p[n] for n in self.learnable_names])

    def goal(self) -> np.ndarray:
        return np.array(self.x_goal if self.x_goal is not None else _template(self.env_id).x_goal, dtype=float)

    def start(self) -> np.ndarray:
        return np.array(self.x0 if self.x0 is not None else _template(self.env_id).x0, dtype=float)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown env config keys: {sorted(extra)}")
        if "env_id" not in d:
            raise ConfigError("env config needs env_id")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "EnvConfig":
        return cls.from_dict(json.loads(s))


# -- equations of motion (smooth, componentwise) ---------------------------

def pendulum_accel(x, u, mass, length, damping):
    q, dq = x[0], x[1]
    return (u[0] - mass * GRAVITY * length * np.sin(q) - damping * dq) / (mass * length * length)


def cartpole_accel(x, u, mc, mp, l):
    q, dq = x[1], x[3]
    s, c = np.sin(q), np.cos(q)
    den = mc + mp * s * s
    ddx = (u[0] + mp * s * (l * dq * dq + GRAVITY * c)) / den
    ddq = (-u[0] * c - mp * l * dq * dq * c * s - (mc + mp) * GRAVITY * s) / (l * den)
    return ddx, ddq


def twolink_accel(x, u, l1, l2, m1, m2):
    q2, dq1, dq2 = x[1], x[2], x[3]
    c2, s2 = np.cos(q2), np.sin(q2)
    M11 = m1 * l1 * l1 / 3.0 + m2 * (l1 * l1 + l2 * l2 / 3.0 + l1 * l2 * c2)
    M12 = m2 * (l2 * l2 / 3.0 + 0.5 * l1 * l2 * c2)
    M22 = m2 * l2 * l2 / 3.0
    h = 0.5 * m2 * l1 * l2 * s2
    b1 = u[0] + h * (2.0 * dq1 * dq2 + dq2 * dq2)
    b2 = u[1] - h * dq1 * dq1
    det = M11 * M22 - M12 * M12
    return (M22 * b1 - M12 * b2) / det, (M11 * b2 - M12 * b1) / det


def _full_params(cfg: EnvConfig, theta):
    """Parameter dict with learnable entries taken from ``theta`` (floats or hyper-duals)."""
    p = dict(cfg.params)
    for name, val in zip(cfg.learnable_names, theta):
        p[name] = val
    return p


def make_env(cfg: EnvConfig, x0=None) -> ProblemSpec:
    tpl = _template(cfg.env_id)
    n, m, dt = tpl.n, tpl.m, float(cfg.dt)
    goal = cfg.goal()
    start = np.asarray(cfg.start() if x0 is None else x0, dtype=float).copy()
    if start.size != n:
        raise ConfigError(f"x0 must have {n} entries")
    weights = _STATE_W[cfg.env_id]
    env = cfg.env_id

    def dynamics(x, u, th):
        p = _full_params(cfg, th)
        if env == "pendulum":
            ddq = pendulum_accel(x, u, p["mass"], p["length"], p["damping"])
            return np.array([x[0] + dt * x[1], x[1] + dt * ddq])
        if env == "cartpole":
            ddx, ddq = cartpole_accel(x, u, p["cart_mass"], p["pole_mass"], p["pole_length"])
            return np.array([x[0] + dt * x[2], x[1] + dt * x[3], x[2] + dt * ddx, x[3] + dt * ddq])
        a1, a2 = twolink_accel(x, u, p["length1"], p["length2"], p["mass1"], p["mass2"])
        return np.array([x[0] + dt * x[2], x[1] + dt * x[3], x[2] + dt * a1, x[3] + dt * a2])

    def state_cost(x, p):
        out = 0.0
        for i, w in enumerate(weights):
            e = x[i] - goal[i]
            out = out + p[w] * (e * e)
        return out

    def stage_cost(x, u, th):
        out = state_cost(x, _full_params(cfg, th))
        for j in range(m):
            out = out + u[j] * u[j]
        return out

    def final_cost(x, th):
        return state_cost(x, _full_params(cfg, th))

    def control_bound(u, p):
        umax = p["u_max"]
        if cfg.norm == "2":
            sq = 0.0
            for j in range(m):
                sq = sq + u[j] * u[j]
            return [sq - umax * umax]
        return [u[j] - umax for j in range(m)] + [-u[j] - umax for j in range(m)]

    def path_ineq(x, u, th):
        p = _full_params(cfg, th)
        rows = control_bound(u, p)
        if tpl.has_xmax:
            rows += [x[0] - p["x_max"], -x[0] - p["x_max"]]
        return np.array(rows)

    def term_ineq(x, th):
        p = _full_params(cfg, th)
        return np.array([x[0] - p["x_max"], -x[0] - p["x_max"]])

    def initial_state(th):
        return start.copy()

    kw = {}
    if tpl.has_xmax:
        kw["term_ineq"] = term_ineq
    return ProblemSpec(n=n, m=m, r=len(cfg.learnable_names), T=cfg.T, dynamics=dynamics,
                       initial_state=initial_state, stage_cost=stage_cost, final_cost=final_cost,
                       path_ineq=path_ineq, name=env, theta_names=cfg.learnable_names, **kw)


def demo_starts(cfg: EnvConfig, n_episodes: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    base = cfg.start()
    return [base + rng.uniform(-cfg.demo_x0_spread, cfg.demo_x0_spread, base.size) for _ in range(n_episodes)]


def make_demos(cfg: EnvConfig, n_episodes: int, seed: int, opts=None) -> list:
    """Constrained optima of the true system from seeded initial states."""
    if n_episodes < 0:
        raise ValueError("n_episodes must be non-negative")
    opts = opts or SolveOptions(max_iters=500, tol_grad=1e-9)
    theta = cfg.theta_true()
    rng = np.random.default_rng([seed, 1])
    demos = []
    for x0 in demo_starts(cfg, n_episodes, seed):
        spec = make_env(cfg, x0=x0)
        res, _ = solve_constrained(spec, theta, default_schedule(cfg.demo_gamma), opts)
        traj = res.trajectory
        if cfg.demo_noise > 0:
            traj = Trajectory(traj.states + cfg.demo_noise * rng.standard_normal(traj.states.shape),
                              traj.controls + cfg.demo_noise * rng.standard_normal(traj.controls.shape))
        demos.append(traj)
    return demos
