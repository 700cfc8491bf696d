import numpy as np
import pytest

from safepdp.envs import EnvConfig
from safepdp.experiments import gamma_sweep, gradcheck, loglog_slope, timing


def test_gradcheck_pendulum_barrier():
    res = gradcheck(EnvConfig("pendulum", T=20))
    assert res.rel_error < 1e-4 and res.r == 5


def test_gradcheck_rejects_strategy_c():
    with pytest.raises(ValueError):
        gradcheck(EnvConfig("pendulum", T=5), strategy="C")


def test_single_gamma_gives_single_row():
    rows = gamma_sweep(EnvConfig("pendulum", T=20), [1e-2], with_grad=False)
    assert len(rows) == 1 and rows[0].gamma == 1e-2
    assert np.isnan(rows[0].rel_grad_error) and rows[0].rel_traj_error > 0


def test_sweep_keeps_caller_order():
    rows = gamma_sweep(EnvConfig("pendulum", T=20), [1e-2, 1.0], with_grad=False)
    assert [r.gamma for r in rows] == [1e-2, 1.0]
    assert rows[0].rel_traj_error < rows[1].rel_traj_error
    with pytest.raises(ValueError):
        gamma_sweep(EnvConfig("pendulum", T=5), [])


def test_slope_of_power_law():
    T = np.array([10, 20, 40, 80])
    assert loglog_slope(T, 3.0 * T ** 1.5) == pytest.approx(1.5, rel=1e-12)


def test_identical_horizons_have_no_slope():
    assert np.isnan(loglog_slope([50, 50], [1.0, 2.0]))
    assert np.isnan(timing(EnvConfig("pendulum"), [20, 20], repeats=1).slope)


def test_timing_needs_two_horizons():
    with pytest.raises(ValueError):
        timing(EnvConfig("pendulum"), [50])


def test_doubling_horizon_is_not_quadratic():
    res = timing(EnvConfig("cartpole"), [200, 400], repeats=5)
    assert res.times[1] / res.times[0] < 4.0
