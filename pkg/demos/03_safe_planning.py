# Safe motion planning for the cartpole.
#
# Controls are a degree-10 Lagrange polynomial. The outer loop minimizes the
# control cost plus a log barrier on the cart and force limits, lowering the
# barrier weight rung by rung. Every accepted plan stays strictly inside the
# limits, which the final certification re-checks from the log.

import numpy as np

from safepdp.apps import PolyControl, plan
from safepdp.envs import EnvConfig
from safepdp.outer import OuterOptions

cfg = EnvConfig("cartpole")
ctrl = PolyControl(cfg.T, 1, 10)
ladder = [(1.0, 1e-2), (1e-1, 1e-2), (1e-2, 1e-2), (1e-3, 1e-2), (1e-4, 1e-2)]
log = plan(cfg, ctrl, OuterOptions(lr=1e-2, max_iters=100, continuation=ladder, max_halvings=40))

for (eps, _), loss in zip(ladder, log.rung_loss):
    print(f"epsilon {eps:7.0e}  control cost {loss:10.3f}")
print(f"{len(log.records)} accepted iterates, worst max g {np.max(log.column('max_g')):.3e}")
log.certify()
print("certified: no iterate touched a constraint")
