"""Application pipelines: safe policy optimization, safe planning, and learning MPCs.

Policy optimization and planning differentiate a rollout directly, so their
trajectory derivatives come from the feedback-form auxiliary system.  MPC
learning differentiates through trajectory optimization with one of the three
gradient strategies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .auxsys import solve_aux_feedback
from .deriv import expand
from .envs import EnvConfig, make_env
from .errors import InitNotSafe, NonFiniteError
from .ocp import ProblemSpec, Trajectory, _terminal_points, constraint_report, rollout, total_cost
from .outer import OuterOptions, RunLog, SolverPipeline, TaskSpec, run
from .trajopt import SolveOptions


# -- parameterizations -----------------------------------------------------

@dataclass
class NeuralPolicy:
    """``u = W2 tanh(W1 x + b1) + b2`` with sizes n-n-m; ``theta`` packs (W1, b1, W2, b2)."""

    n: int
    m: int
    theta: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros(self.size)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.size != self.size:
            raise ValueError(f"policy needs {self.size} parameters, got {self.theta.size}")

    @property
    def size(self) -> int:
        n, m = self.n, self.m
        return n * n + n + m * n + m

    @classmethod
    def random(cls, n, m, seed, scale=0.1):
        rng = np.random.default_rng(seed)
        p = cls(n, m)
        p.theta = scale * rng.standard_normal(p.size)
        return p

    def unpack(self, theta):
        n, m = self.n, self.m
        i = 0
        W1 = np.asarray(theta[i:i + n * n]).reshape(n, n); i += n * n
        b1 = np.asarray(theta[i:i + n]); i += n
        W2 = np.asarray(theta[i:i + m * n]).reshape(m, n); i += m * n
        b2 = np.asarray(theta[i:i + m])
        return W1, b1, W2, b2

    def __call__(self, x, theta=None):
        W1, b1, W2, b2 = self.unpack(self.theta if theta is None else theta)
        hidden = np.tanh(W1 @ np.asarray(x) + b1)
        return W2 @ hidden + b2

    def fn(self):
        """Policy in the ``(x, u, theta)`` convention (``u`` unused)."""
        return lambda x, u, th: self(x, th)


@dataclass
class PolyControl:
    """Lagrange-polynomial control ``u(t) = sum_i b_i(t) u_i`` with uniform pivots on [0, T-1]."""

    T: int
    m: int
    N: int = 10

    @property
    def size(self) -> int:
        return self.m * (self.N + 1)

    @property
    def pivots(self) -> np.ndarray:
        if self.N == 0:
            return np.zeros(1)
        return np.linspace(0.0, self.T - 1.0, self.N + 1)

    def basis(self, t) -> np.ndarray:
        """Lagrange basis values b_0(t)..b_N(t)."""
        piv = self.pivots
        b = np.ones(self.N + 1)
        for i in range(self.N + 1):
            for j in range(self.N + 1):
                if j != i:
                    b[i] *= (t - piv[j]) / (piv[i] - piv[j])
        return b

    def basis_matrix(self) -> np.ndarray:
        """(T, N+1) basis values at every control step."""
        return np.array([self.basis(t) for t in range(self.T)])

    def jacobian(self, t) -> np.ndarray:
        """du(t)/dtheta = b(t)' kron I_m, shape (m, m(N+1))."""
        return np.kron(self.basis(t)[None, :], np.eye(self.m))

    def controls(self, theta) -> np.ndarray:
        P = np.asarray(theta, dtype=float).reshape(self.N + 1, self.m)
        return self.basis_matrix() @ P


@dataclass
class DemoSet:
    trajectories: list
    x0s: list = field(default_factory=list)

    def __post_init__(self):
        if not self.x0s:
            self.x0s = [t.states[0].copy() for t in self.trajectories]
        dims = {(t.states.shape[1], t.controls.shape[1]) for t in self.trajectories}
        if len(dims) > 1:
            raise ValueError("all demonstrations must share state and control dimensions")


# -- tasks -----------------------------------------------------------------

def _flat_grad(gx, gu):
    return np.concatenate([gx.ravel(), gu.ravel()])


def control_cost_task(spec: ProblemSpec, env_theta, r: int, constrained: bool = True) -> TaskSpec:
    """Task loss = the system's control cost; task constraints = its inequalities (all known)."""
    env_theta = np.asarray(env_theta, dtype=float)

    def loss(trajs, theta):
        total = 0.0
        for tr in trajs:
            total += total_cost(spec, env_theta, tr)
        return total

    def loss_grad(trajs, theta):
        out = []
        for tr in trajs:
            e = expand(spec.stage_cost, tr.states[:-1], tr.controls, env_theta, first=("x", "u"))
            eT = expand(spec.term_fn("cost"), *_terminal_points(tr), env_theta, first=("x",))
            gx = np.vstack([e.jac["x"][:, 0], eT.jac["x"][0]])
            out.append(_flat_grad(gx, e.jac["u"][:, 0]))
        return out, np.zeros(r)

    def constraints(trajs, theta):
        vals = []
        for tr in trajs:
            rep = constraint_report(spec, env_theta, tr)
            vals += [rep.g.ravel(), rep.gT]
        return np.concatenate(vals) if vals else np.zeros(0)

    def constraints_vjp(trajs, theta, w):
        out = []
        off = 0
        for tr in trajs:
            T = tr.T
            gx = np.zeros_like(tr.states)
            gu = np.zeros_like(tr.controls)
            if spec.q:
                e = expand(spec.path_ineq, tr.states[:-1], tr.controls, env_theta, first=("x", "u"))
                wt = w[off:off + T * spec.q].reshape(T, spec.q)
                gx[:-1] += np.einsum("ti,tij->tj", wt, e.jac["x"])
                gu += np.einsum("ti,tij->tj", wt, e.jac["u"])
                off += T * spec.q
            if spec.qT:
                eT = expand(spec.term_fn("ineq"), *_terminal_points(tr), env_theta, first=("x",))
                gx[-1] += w[off:off + spec.qT] @ eT.jac["x"][0]
                off += spec.qT
            out.append(_flat_grad(gx, gu))
        return out, np.zeros(r)

    if not constrained:
        return TaskSpec(loss, loss_grad)
    return TaskSpec(loss, loss_grad, constraints, constraints_vjp)


def reproducing_task(demos: DemoSet, r: int) -> TaskSpec:
    """Sum over demos of the squared distance between reproduced and demonstrated trajectories."""
    targets = [d.flat() for d in demos.trajectories]

    def loss(trajs, theta):
        return float(sum(np.sum((t.flat() - d) ** 2) for t, d in zip(trajs, targets)))

    def loss_grad(trajs, theta):
        return [2.0 * (t.flat() - d) for t, d in zip(trajs, targets)], np.zeros(r)

    return TaskSpec(loss, loss_grad)


# -- rollout pipelines -----------------------------------------------------

class _RolloutPipeline:
    def __init__(self, spec: ProblemSpec, env_theta):
        self.spec = spec
        self.env_theta = np.asarray(env_theta, dtype=float)

    def max_g(self, theta, trajs) -> float:
        return float(max(constraint_report(self.spec, self.env_theta, t).max_g for t in trajs))

    def _dyn_jac(self, traj):
        e = expand(self.spec.dynamics, traj.states[:-1], traj.controls, self.env_theta, first=("x", "u"),
                   name=f"{self.spec.name}.dynamics")
        return e.jac["x"], e.jac["u"]


class PolicyPipeline(_RolloutPipeline):
    """Closed-loop rollout under a neural policy."""

    def __init__(self, spec: ProblemSpec, env_theta, policy: NeuralPolicy):
        super().__init__(spec, env_theta)
        self.policy = policy

    def forward(self, theta) -> list:
        s = self.spec
        xs = np.empty((s.T + 1, s.n))
        us = np.empty((s.T, s.m))
        xs[0] = s.initial_state(self.env_theta)
        with np.errstate(all="ignore"):
            for t in range(s.T):
                us[t] = self.policy(xs[t], theta)
                xs[t + 1] = s.dynamics(xs[t], us[t], self.env_theta)
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
            raise NonFiniteError(f"{s.name}: policy rollout diverged")
        return [Trajectory(xs, us)]

    def backward(self, theta, trajs) -> list:
        traj = trajs[0]
        Fx, Fu = self._dyn_jac(traj)
        e = expand(self.policy.fn(), traj.states[:-1], np.zeros((traj.T, 0)), theta, first=("x", "theta"),
                   name="policy")
        X0 = np.zeros((self.spec.n, self.policy.size))
        return [solve_aux_feedback(Fx, Fu, e.jac["x"], e.jac["theta"], X0)]


class PlanPipeline(_RolloutPipeline):
    """Open-loop rollout of Lagrange-polynomial controls."""

    def __init__(self, spec: ProblemSpec, env_theta, ctrl: PolyControl):
        super().__init__(spec, env_theta)
        self.ctrl = ctrl
        self._Ue = np.array([ctrl.jacobian(t) for t in range(spec.T)])

    def forward(self, theta) -> list:
        return [rollout(self.spec, self.env_theta, self.ctrl.controls(theta))]

    def backward(self, theta, trajs) -> list:
        Fx, Fu = self._dyn_jac(trajs[0])
        s = self.spec
        Ux = np.zeros((s.T, s.m, s.n))
        return [solve_aux_feedback(Fx, Fu, Ux, self._Ue, np.zeros((s.n, self.ctrl.size)))]


# -- applications ----------------------------------------------------------

def _env(env) -> tuple:
    if isinstance(env, EnvConfig):
        return make_env(env), env.theta_true()
    spec, theta = env
    return spec, np.asarray(theta, dtype=float)


def imitate_init(env, policy: NeuralPolicy, reference: Trajectory, iters: int = 500,
                 lr: float = 0.1) -> NeuralPolicy:
    """Regress the policy onto a feasible reference trajectory, then check the closed loop is safe.

    Plain gradient descent on ``sum_t |pi(x_t) - u_t|^2 / T`` with step halving
    whenever a step would increase the regression loss.
    """
    spec, env_theta = _env(env)
    X, U = reference.states[:-1], reference.controls
    fn = policy.fn()
    theta = policy.theta.copy()

    def reg(th):
        e = expand(fn, X, np.zeros((len(X), 0)), th, first=("theta",), name="policy")
        res = e.value - U
        return float(np.sum(res ** 2)) / len(X), 2.0 * np.einsum("ti,tij->j", res, e.jac["theta"]) / len(X)

    loss, grad = reg(theta)
    step = lr
    for _ in range(iters):
        if loss < 1e-14 or np.linalg.norm(grad) < 1e-12:
            break
        cand = theta - step * grad
        c_loss, c_grad = reg(cand)
        if c_loss <= loss:
            theta, loss, grad = cand, c_loss, c_grad
            step = min(step * 1.5, 10 * lr)
        else:
            step *= 0.5
    fitted = NeuralPolicy(policy.n, policy.m, theta)
    traj = PolicyPipeline(spec, env_theta, fitted).forward(theta)[0]
    max_g = constraint_report(spec, env_theta, traj).max_g
    if not max_g < 0:
        raise InitNotSafe(f"closed-loop rollout of the fitted policy violates constraints (max g = {max_g:.6g})")
    return fitted


def policy_opt(env, policy: NeuralPolicy, opts: OuterOptions, constrained: bool = True) -> RunLog:
    spec, env_theta = _env(env)
    pipe = PolicyPipeline(spec, env_theta, policy)
    task = control_cost_task(spec, env_theta, policy.size, constrained=constrained)
    return run(pipe, task, opts, policy.theta)


def plan(env, ctrl: PolyControl, opts: OuterOptions, theta0=None) -> RunLog:
    spec, env_theta = _env(env)
    if ctrl.T != spec.T or ctrl.m != spec.m:
        raise ValueError("PolyControl dimensions do not match the environment")
    pipe = PlanPipeline(spec, env_theta, ctrl)
    task = control_cost_task(spec, env_theta, ctrl.size)
    theta0 = np.zeros(ctrl.size) if theta0 is None else np.asarray(theta0, dtype=float)
    return run(pipe, task, opts, theta0)


def init_theta(cfg: EnvConfig, seed: int, spread: float = 0.5, nominal=None) -> np.ndarray:
    """Uniform draw within +-spread (relative) around a nominal guess."""
    nominal = cfg.theta_true() if nominal is None else np.asarray(nominal, dtype=float)
    rng = np.random.default_rng(seed)
    return nominal * rng.uniform(1.0 - spread, 1.0 + spread, nominal.size)


def mpc_pipeline(cfg: EnvConfig, demos: DemoSet, strategy: str, gamma: float = 1e-2,
                 solve_opts: SolveOptions = None, constrained_gamma: float = 1e-4) -> SolverPipeline:
    specs = [make_env(cfg, x0=x0) for x0 in demos.x0s]
    # each inner solve starts from the demonstrated controls, which selects the
    # same local solution branch (swing direction) as the demonstration
    return SolverPipeline(specs, strategy, gamma, solve_opts, constrained_gamma=constrained_gamma,
                          initial_guess=demos.trajectories)


def learn_mpc(cfg: EnvConfig, demos: DemoSet, learnable: Optional[Sequence[str]] = None, strategy: str = "B",
              opts: OuterOptions = None, theta0=None, init_spread: float = 0.5,
              solve_opts: SolveOptions = None) -> RunLog:
    """Fit the masked parameters so the optimal trajectories reproduce the demonstrations."""
    if not demos.trajectories:
        raise ValueError("learn_mpc needs at least one demonstration")
    opts = opts or OuterOptions(lr=1e-5, max_iters=1000, gradient_strategy=strategy)
    if learnable is not None:
        cfg = replace(cfg, learnable=list(learnable))
    pipe = mpc_pipeline(cfg, demos, strategy, opts.ladder()[0][1], solve_opts)
    task = reproducing_task(demos, pipe.r)
    if theta0 is None:
        theta0 = init_theta(cfg, opts.seed, init_spread)
    return run(pipe, task, opts, theta0)
