"""Open up a traffic IAM's memory: CCA, a state decoder and a linear probe.

The cars driving round the loop are invisible to the agent.  Once trained,
its 8 recurrent units should carry enough about them for a decoder to beat
the majority-class guess on the hidden cells.

    python demos/04_what_the_memory_holds.py [total_steps]
"""

import sys

import numpy as np

from iamlab.analysis import cca_fit, collect_activations, linear_probe, train_memory_decoder
from iamlab.config import env_spec, policy_spec, resolve
from iamlab.ppo import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 60_000
cfg = resolve({"env": {"name": "traffic"}, "policy": {"variant": "iam", "hidden": 8},
               "ppo": {"total_steps": steps, "lr": 1e-3, "gamma": 0.95, "ent_coef": 0.001}})
result = train(cfg.ppo_config(0), policy_spec(cfg), env_spec(cfg))
print(f"trained for {steps} steps, last mean return {result.metrics[-1]['mean_return']:.2f}")

ds = collect_activations(result.policy, env_spec(cfg), policy_spec(cfg), episodes=100, seed=1)
hidden = ds.targets[:, ds.hidden_columns]
busy = hidden[:, hidden.std(axis=0) > 0]
cca = cca_fit(ds.memory, busy, ridge=1e-2)
print("leading canonical correlations, memory vs loop occupancy:",
      np.round(cca.correlations[:4], 3))

dec = train_memory_decoder(ds, epochs=100, rng=np.random.default_rng(0))
print(f"decoder on hidden cells: {dec.accuracy:.4f} vs majority {dec.baseline_accuracy:.4f} "
      f"(bootstrap p = {dec.p_value:.3g})")

cars_in_loop = hidden.sum(axis=1)
probe = linear_probe(ds.memory, cars_in_loop, ds.episode, rng=np.random.default_rng(0))
print(f"probe for the number of hidden cars: R^2 {probe.mean_r2:.3f}, "
      f"null mean {probe.null_mean_r2.mean():.3f} (p = {probe.p_value:.3g})")
