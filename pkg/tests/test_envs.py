import numpy as np
import pytest

from safepdp.barrier import recover_multipliers
from safepdp.deriv import expand
from safepdp.envs import GRAVITY, TEMPLATES, EnvConfig, make_demos, make_env, param_names
from safepdp.errors import ConfigError
from safepdp.ocp import constraint_report, cpmp_residual, rollout

ENVS = sorted(TEMPLATES)


def _cartpole_lagrange(x, u, mc, mp, l):
    """Point-mass pole hanging at angle q from the downward vertical."""
    q, dq = x[1], x[3]
    M = np.array([[mc + mp, mp * l * np.cos(q)], [mp * l * np.cos(q), mp * l * l]])
    rhs = np.array([u + mp * l * np.sin(q) * dq * dq, -mp * GRAVITY * l * np.sin(q)])
    return np.linalg.solve(M, rhs)


def _twolink_mass(q, l1, l2, m1, m2):
    """Planar uniform rods: M = sum m Jv'Jv + I Jw'Jw."""
    q1, q2 = q
    s1, c1, s12, c12 = np.sin(q1), np.cos(q1), np.sin(q1 + q2), np.cos(q1 + q2)
    Jv1 = 0.5 * l1 * np.array([[-s1, 0.0], [c1, 0.0]])
    Jv2 = np.array([[-l1 * s1 - 0.5 * l2 * s12, -0.5 * l2 * s12], [l1 * c1 + 0.5 * l2 * c12, 0.5 * l2 * c12]])
    Jw1, Jw2 = np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]])
    return (m1 * Jv1.T @ Jv1 + m1 * l1 * l1 / 12 * Jw1.T @ Jw1
            + m2 * Jv2.T @ Jv2 + m2 * l2 * l2 / 12 * Jw2.T @ Jw2)


def _twolink_lagrange(x, u, l1, l2, m1, m2, h=1e-6):
    q, dq = x[:2], x[2:]
    M = _twolink_mass(q, l1, l2, m1, m2)
    dM = [(_twolink_mass(q + h * e, l1, l2, m1, m2) - _twolink_mass(q - h * e, l1, l2, m1, m2)) / (2 * h)
          for e in np.eye(2)]
    Mdot = dM[0] * dq[0] + dM[1] * dq[1]
    coriolis = Mdot @ dq - 0.5 * np.array([dq @ dM[k] @ dq for k in range(2)])
    return np.linalg.solve(M, u - coriolis)


def test_pendulum_equilibrium_is_fixed_point():
    cfg = EnvConfig("pendulum")
    spec = make_env(cfg)
    np.testing.assert_array_equal(spec.dynamics(np.zeros(2), np.zeros(1), cfg.theta_true()), np.zeros(2))


@pytest.mark.parametrize("seed", range(4))
def test_cartpole_against_lagrangian(seed):
    rng = np.random.default_rng(seed)
    cfg = EnvConfig("cartpole", true_params={"cart_mass": 1.3, "pole_mass": 0.4, "pole_length": 0.7})
    x, u = rng.uniform(-2, 2, 4), rng.uniform(-3, 3, 1)
    ddx, ddq = _cartpole_lagrange(x, u[0], 1.3, 0.4, 0.7)
    expect = x + cfg.dt * np.array([x[2], x[3], ddx, ddq])
    np.testing.assert_allclose(make_env(cfg).dynamics(x, u, cfg.theta_true()), expect, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_twolink_against_lagrangian(seed):
    rng = np.random.default_rng(seed)
    p = {"length1": 0.8, "length2": 1.2, "mass1": 1.5, "mass2": 0.7}
    cfg = EnvConfig("twolink", true_params=p)
    x, u = rng.uniform(-2, 2, 4), rng.uniform(-2, 2, 2)
    acc = _twolink_lagrange(x, u, p["length1"], p["length2"], p["mass1"], p["mass2"])
    expect = x + cfg.dt * np.r_[x[2:], acc]
    np.testing.assert_allclose(make_env(cfg).dynamics(x, u, cfg.theta_true()), expect, rtol=1e-7, atol=1e-8)


def test_control_bound_boundary_value():
    cfg = EnvConfig("pendulum", true_params={"u_max": 5.0})
    g = make_env(cfg).path_ineq(np.zeros(2), np.array([5.0]), cfg.theta_true())
    assert g[0] == 0.0 and g[1] == -10.0


def test_two_norm_bound():
    cfg = EnvConfig("twolink", norm="2", true_params={"u_max": 2.0})
    g = make_env(cfg).path_ineq(np.zeros(4), np.array([1.2, 1.6]), cfg.theta_true())
    assert g.shape == (1,) and g[0] == pytest.approx(0.0, abs=1e-15)


def test_state_box_on_cart_position():
    cfg = EnvConfig("cartpole", true_params={"x_max": 0.5})
    spec = make_env(cfg)
    g = spec.path_ineq(np.array([0.5, 0, 0, 0]), np.zeros(1), cfg.theta_true())
    np.testing.assert_array_equal(g[2:], [0.0, -1.0])
    np.testing.assert_allclose(spec.term_ineq(np.array([-0.7, 0, 0, 0]), cfg.theta_true()), [-1.2, 0.2], rtol=1e-15)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        EnvConfig("quadrotor")
    with pytest.raises(ConfigError):
        EnvConfig("cartpole", true_params={"pole_mass": 0.0})
    with pytest.raises(ConfigError):
        EnvConfig("pendulum", true_params={"length": -1.0})
    with pytest.raises(ConfigError):
        EnvConfig("pendulum", dt=0.0)
    with pytest.raises(ConfigError):
        EnvConfig("pendulum", T=0)
    with pytest.raises(ConfigError):
        EnvConfig("pendulum", norm="1")
    with pytest.raises(ConfigError):
        EnvConfig("pendulum", learnable=["pole_mass"])
    with pytest.raises(ConfigError):
        EnvConfig("pendulum", true_params={"bogus": 1.0})
    with pytest.raises(ConfigError):
        EnvConfig.from_dict({"env_id": "pendulum", "horizon": 3})


def test_parameter_layout_and_mask():
    assert param_names("cartpole")[-2:] == ("x_max", "u_max")
    cfg = EnvConfig("cartpole", learnable=["pole_length", "cart_mass"])
    assert cfg.learnable_names == ("cart_mass", "pole_length")
    np.testing.assert_array_equal(cfg.theta_true(), [1.0, 1.0])
    assert cfg.learnable_mask.sum() == 2
    default = EnvConfig("cartpole")
    # state-box bound is known, never learnable by default
    assert "x_max" not in default.learnable_names and "u_max" not in default.learnable_names


@pytest.mark.parametrize("env_id", ENVS)
def test_config_roundtrip(env_id):
    cfg = EnvConfig(env_id, T=8, true_params={param_names(env_id)[0]: 1.1}, demo_x0_spread=0.2)
    back = EnvConfig.from_json(cfg.to_json())
    assert back == cfg
    us = np.random.default_rng(0).uniform(-0.5, 0.5, (8, TEMPLATES[env_id].m))
    a = rollout(make_env(cfg), cfg.theta_true(), us)
    b = rollout(make_env(back), back.theta_true(), us)
    assert a.flat().tobytes() == b.flat().tobytes()


@pytest.mark.parametrize("env_id", ENVS)
def test_smooth_everywhere_in_sweep(env_id):
    cfg = EnvConfig(env_id)
    spec = make_env(cfg)
    tpl = TEMPLATES[env_id]
    rng = np.random.default_rng(5)
    X, U = rng.uniform(-3, 3, (64, tpl.n)), rng.uniform(-3, 3, (64, tpl.m))
    e = expand(spec.dynamics, X, U, cfg.theta_true(), second=(("x", "x"), ("u", "theta"), ("x", "theta")))
    assert all(np.all(np.isfinite(v)) for v in e.hess.values())
    c = expand(spec.stage_cost, X, U, cfg.theta_true(), second=(("x", "x"), ("u", "u"), ("x", "theta")))
    assert all(np.all(np.isfinite(v)) for v in c.hess.values())


def test_no_demos():
    assert make_demos(EnvConfig("pendulum"), 0, 0) == []


def test_demos_deterministic_feasible_and_optimal():
    cfg = EnvConfig("pendulum", T=30, demo_x0_spread=0.3)
    a, b = make_demos(cfg, 2, 4), make_demos(cfg, 2, 4)
    assert len(a) == 2
    assert not np.array_equal(a[0].states[0], a[1].states[0])
    th = cfg.theta_true()
    for da, db in zip(a, b):
        assert da.flat().tobytes() == db.flat().tobytes()
        spec = make_env(cfg, x0=da.states[0])
        assert constraint_report(spec, th, da).max_g < 0
        mult = recover_multipliers(spec, th, da, cfg.demo_gamma)
        assert cpmp_residual(spec, th, da, mult).stationarity < 1e-6


def test_demo_noise_is_seeded():
    cfg = EnvConfig("pendulum", T=10, demo_noise=0.01)
    clean = make_demos(EnvConfig("pendulum", T=10), 1, 0)[0]
    a, b = make_demos(cfg, 1, 0)[0], make_demos(cfg, 1, 0)[0]
    assert np.array_equal(a.states, b.states) and not np.array_equal(a.states, clean.states)
