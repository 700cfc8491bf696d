# How close is the barrier solution to the constrained one?
#
# For the cartpole swing-up we shrink the barrier weight and measure both the
# trajectory and its parameter gradient against a tightly solved constrained
# reference (the gradient reference is finite differences of that solve).

from safepdp.envs import EnvConfig
from safepdp.experiments import gamma_sweep

rows = gamma_sweep(EnvConfig("cartpole"), [1.0, 1e-1, 1e-2, 1e-3])
print(f"{'gamma':>8s} {'traj error':>11s} {'grad error':>11s} {'time [s]':>9s}")
for r in rows:
    print(f"{r.gamma:8.0e} {r.rel_traj_error:11.3%} {r.rel_grad_error:11.3%} {r.solve_time:9.3f}")
