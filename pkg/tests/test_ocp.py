import numpy as np
import pytest

from safepdp.envs import EnvConfig, cartpole_accel, make_env
from safepdp.errors import NonFiniteError
from safepdp.ocp import (Multipliers, ProblemSpec, Trajectory, constraint_report, cpmp_residual,
                         identify_active, rollout, total_cost)


def accumulator(T=3, **kw):
    return ProblemSpec(1, 1, 0, T, lambda x, u, th: x + u, lambda th: np.zeros(1),
                       lambda x, u, th: u[0] * u[0], **kw)


def test_accumulator_rollout():
    tr = rollout(accumulator(), [], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(tr.states[:, 0], [0, 1, 2, 3])
    assert tr.T == 3 and tr.controls.shape == (3, 1)


def test_pendulum_rest_is_fixed_point():
    cfg = EnvConfig("pendulum")
    tr = rollout(make_env(cfg), cfg.theta_true(), np.zeros((cfg.T, 1)))
    np.testing.assert_array_equal(tr.states, np.zeros_like(tr.states))


def test_cartpole_rollout_matches_reintegration():
    cfg = EnvConfig("cartpole")
    spec = make_env(cfg)
    p = cfg.params
    us = np.random.default_rng(3).uniform(-2, 2, (cfg.T, 1))
    tr = rollout(spec, cfg.theta_true(), us)
    x = np.zeros(4)
    for t in range(cfg.T):
        ddx, ddq = cartpole_accel(x, us[t], p["cart_mass"], p["pole_mass"], p["pole_length"])
        x = x + cfg.dt * np.array([x[2], x[3], ddx, ddq])
        assert np.array_equal(x, tr.states[t + 1])


def test_rollout_is_deterministic():
    cfg = EnvConfig("cartpole")
    spec = make_env(cfg)
    us = np.random.default_rng(0).uniform(-1, 1, (cfg.T, 1))
    a, b = rollout(spec, cfg.theta_true(), us), rollout(spec, cfg.theta_true(), us)
    assert a.states.tobytes() == b.states.tobytes()


def test_diverging_rollout_raises():
    spec = ProblemSpec(1, 1, 0, 20, lambda x, u, th: x * x * 1e10, lambda th: np.ones(1) * 10,
                       lambda x, u, th: 0.0 * u[0])
    with pytest.raises(NonFiniteError, match="time step"):
        rollout(spec, [], np.zeros(20))


def test_theta_size_checked():
    with pytest.raises(ValueError):
        rollout(accumulator(), [1.0], np.zeros(3))


def test_total_cost_arithmetic():
    spec = accumulator(T=2)
    assert total_cost(spec, [], rollout(spec, [], [1.0, 2.0])) == 5.0
    zero = ProblemSpec(1, 1, 0, 2, lambda x, u, th: x + u, lambda th: np.zeros(1), lambda x, u, th: 0.0 * u[0])
    assert total_cost(zero, [], rollout(zero, [], [1.0, 2.0])) == 0.0


def test_cartpole_cost_term_by_term():
    cfg = EnvConfig("cartpole")
    spec, th, p = make_env(cfg), cfg.theta_true(), cfg.params
    tr = rollout(spec, th, np.random.default_rng(5).uniform(-1, 1, (cfg.T, 1)))
    w = np.array([p["w_x"], p["w_q"], p["w_dx"], p["w_dq"]])
    goal = cfg.goal()
    expect = 0.0
    for t in range(cfg.T):
        expect += np.sum(w * (tr.states[t] - goal) ** 2) + tr.controls[t, 0] ** 2
    expect += np.sum(w * (tr.states[-1] - goal) ** 2)
    assert total_cost(spec, th, tr) == pytest.approx(expect, rel=1e-13)


def test_constraint_report_empty_conventions():
    rep = constraint_report(accumulator(), [], rollout(accumulator(), [], np.zeros(3)))
    assert rep.max_g == -np.inf and rep.max_abs_h == 0.0 and rep.g.shape == (3, 0)


def test_constraint_report_abs_bound():
    spec = accumulator(T=2, path_ineq=lambda x, u, th: np.array([np.sqrt(u[0] * u[0]) - 1.0]))
    rep = constraint_report(spec, [], rollout(spec, [], [0.5, -2.0]))
    assert rep.max_g == 1.0


def test_constraint_report_matches_brute_force():
    cfg = EnvConfig("cartpole")
    spec, th = make_env(cfg), cfg.theta_true()
    tr = rollout(spec, th, np.random.default_rng(2).uniform(-3, 3, (cfg.T, 1)))
    rep = constraint_report(spec, th, tr)
    for t in range(cfg.T):
        u, x = tr.controls[t, 0], tr.states[t, 0]
        np.testing.assert_array_equal(rep.g[t], [u - 4.0, -u - 4.0, x - 1.0, -x - 1.0])
    np.testing.assert_array_equal(rep.gT, [tr.states[-1, 0] - 1.0, -tr.states[-1, 0] - 1.0])
    assert rep.max_g == max(rep.g.max(), rep.gT.max())


def _riccati_lqr(T=5, x0=1.0):
    """Analytic solution of x+ = x + u, cost sum x^2 + u^2 + x_T^2."""
    P = [0.0] * (T + 1)
    P[T] = 1.0
    K = [0.0] * T
    for t in range(T - 1, -1, -1):
        K[t] = P[t + 1] / (1.0 + P[t + 1])
        P[t] = 1.0 + P[t + 1] - P[t + 1] ** 2 / (1.0 + P[t + 1])
    xs, us = [x0], []
    for t in range(T):
        us.append(-K[t] * xs[-1])
        xs.append(xs[-1] + us[-1])
    lam = [2.0 * P[t] * xs[t] for t in range(1, T + 1)]  # lam_t = dV_t/dx
    return np.array(xs), np.array(us), np.array(lam)


def lqr_spec(T=5):
    return ProblemSpec(1, 1, 0, T, lambda x, u, th: x + u, lambda th: np.ones(1),
                       lambda x, u, th: x[0] * x[0] + u[0] * u[0], lambda x, th: x[0] * x[0])


def test_cpmp_residual_zero_at_riccati_solution():
    xs, us, lam = _riccati_lqr()
    spec = lqr_spec()
    tr = Trajectory(xs[:, None], us[:, None])
    mult = Multipliers(lam[:, None], np.zeros((5, 0)), np.zeros((5, 0)), np.zeros(0), np.zeros(0))
    res = cpmp_residual(spec, [], tr, mult)
    assert res.stationarity < 1e-12 and res.costate < 1e-12
    assert res.complementarity == 0.0 and res.primal == 0.0


def test_cpmp_residual_detects_non_optimal_point():
    xs, us, lam = _riccati_lqr()
    spec = lqr_spec()
    tr = rollout(spec, [], us + 0.1)
    mult = Multipliers(lam[:, None], np.zeros((5, 0)), np.zeros((5, 0)), np.zeros(0), np.zeros(0))
    assert cpmp_residual(spec, [], tr, mult).stationarity > 1e-3


def test_complementarity_total_is_componentwise_sum():
    spec = accumulator(T=3, path_ineq=lambda x, u, th: np.array([u[0] - 2.0, -u[0] - 2.0]))
    tr = rollout(spec, [], [0.5, -1.0, 1.5])
    rep = constraint_report(spec, [], tr)
    v = np.array([[0.1, 0.2], [0.3, 0.0], [0.05, 0.4]])
    mult = Multipliers(np.zeros((3, 1)), v, np.zeros((3, 0)), np.zeros(0), np.zeros(0))
    res = cpmp_residual(spec, [], tr, mult)
    assert res.complementarity_total == pytest.approx(np.sum(np.abs(v * rep.g)), rel=1e-14)
    assert res.complementarity == pytest.approx(np.abs(v * rep.g).sum(axis=1).max(), rel=1e-14)


def _spec_with_g(values):
    values = np.asarray(values, dtype=float)
    return ProblemSpec(1, 1, 0, 1, lambda x, u, th: x + u, lambda th: np.zeros(1), lambda x, u, th: u[0] * u[0],
                       path_ineq=lambda x, u, th: np.array([v + 0.0 * u[0] for v in values]))


def test_identify_active_threshold():
    spec = _spec_with_g([-1e-5, -0.5])
    act = identify_active(spec, [], rollout(spec, [], [0.0]), delta=1e-3)
    np.testing.assert_array_equal(act.path[0], [0])
    spec = _spec_with_g([-0.1, -0.5])
    assert identify_active(spec, [], rollout(spec, [], [0.0])).count() == 0


def test_identify_active_matches_scan():
    rng = np.random.default_rng(7)
    vals = -np.abs(rng.standard_normal(12)) * 10 ** rng.uniform(-5, 0, 12)
    spec = _spec_with_g(vals)
    act = identify_active(spec, [], rollout(spec, [], [0.0]), delta=1e-3)
    np.testing.assert_array_equal(act.path[0], [i for i, v in enumerate(vals) if v >= -1e-3])
    with pytest.raises(ValueError):
        identify_active(spec, [], rollout(spec, [], [0.0]), delta=0.0)


def test_trajectory_length_contract():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 1)), np.zeros((3, 1)))
