# Differentiate an optimal trajectory with respect to the model parameters.
#
# The pendulum swing-up is solved with its control bound replaced by a log
# barrier. The auxiliary LQR system then gives the full Jacobian of the
# trajectory with respect to every parameter in a single backward pass, and
# we compare it with central finite differences of the solver itself.

import numpy as np

from safepdp.auxsys import build_aux_barrier, solve_aux
from safepdp.barrier import to_barrier
from safepdp.envs import EnvConfig, make_env
from safepdp.trajopt import SolveOptions, solve_unconstrained

cfg = EnvConfig("pendulum", T=30)
spec, theta = make_env(cfg), cfg.theta_true()
opts = SolveOptions(max_iters=300, tol_grad=1e-11)

gamma = 1e-2
problem = to_barrier(spec, gamma)
res = solve_unconstrained(problem, theta, opts)
print(f"inner solve: {res.iters} iterations, cost {res.cost:.6f}, max g {res.max_g:.3e}")

# one Riccati sweep gives d(trajectory)/d(theta) for all parameters at once
grad = solve_aux(build_aux_barrier(problem, theta, res.trajectory)).flat()

h = 1e-5
fd = np.zeros_like(grad)
for i, name in enumerate(cfg.learnable_names):
    e = np.zeros_like(theta)
    e[i] = h
    plus = solve_unconstrained(problem, theta + e, opts).trajectory.flat()
    minus = solve_unconstrained(problem, theta - e, opts).trajectory.flat()
    fd[:, i] = (plus - minus) / (2 * h)
    err = np.linalg.norm(grad[:, i] - fd[:, i]) / np.linalg.norm(fd[:, i])
    print(f"  d xi / d {name:8s}  relative error vs finite differences {err:.2e}")

print(f"overall relative error {np.linalg.norm(grad - fd) / np.linalg.norm(fd):.2e}")
