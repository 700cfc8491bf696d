# Learn the pendulum model inside an MPC from two demonstrations.
#
# The demonstrations come from the true model. Starting from a random guess,
# the outer loop adjusts mass, length and damping so the MPC's optimal
# trajectories reproduce the demos, differentiating through the barrier
# solution at every step. This is a shortened run: the damping estimate is
# still poor after 200 iterations and only settles later. The shipped config
# pendulum_learn_mpc.json runs the full 1000 iterations.

import numpy as np

from safepdp.apps import DemoSet, learn_mpc
from safepdp.envs import EnvConfig, make_demos
from safepdp.outer import OuterOptions

cfg = EnvConfig("pendulum", demo_x0_spread=0.5, learnable=["mass", "length", "damping"])
demos = DemoSet(make_demos(cfg, 2, seed=0))
log = learn_mpc(cfg, demos, strategy="B", opts=OuterOptions(lr=1e-5, max_iters=200, gradient_strategy="B"))

loss = log.column("loss")
for k in (0, 10, 50, 100, 200):
    print(f"iteration {k:4d}  reproducing loss {loss[k]:.4g}")
print("learned ", np.round(log.theta, 4))
print("true    ", cfg.theta_true())
