"""The recurrent channel of an IAM only ever sees the d-set.

Perturbing the robot's location bits changes today's action distribution,
through the feedforward channel, but leaves every recurrent state untouched.

    python demos/02_information_flow.py
"""

import numpy as np

from iamlab.envs import WarehouseEnv
from iamlab.policies import build_policy

env = WarehouseEnv(seed=0)
net = build_policy({"variant": "iam", "selector": "manual", "hidden": 16}, env,
                   np.random.default_rng(7))

rng = np.random.default_rng(1)
T = 12
obs = np.stack([env.reset()] + [env.step(int(rng.integers(4))).observation for _ in range(T - 1)])
obs = obs[:, None, :]                                  # (T, batch=1, N)
tampered = obs.copy()
outside = np.setdiff1d(np.arange(env.obs_dim), env.manual_dset)
tampered[:, :, outside] = rng.permutation(tampered[:, :, outside], axis=2)

a = net.forward(obs, net.initial_state(1))
b = net.forward(tampered, net.initial_state(1))
print("max |memory difference| over all steps:", np.abs(a.memory.data - b.memory.data).max())
print("max |logit difference| over all steps: ", np.abs(a.logits.data - b.logits.data).max())
