"""Train briefly, then evaluate one larger composition with both matching rules.

A few thousand steps is far too little to learn the task; the point is to
see the pieces connect.  Run with ``python demos/short_training_run.py``.
"""

import logging
import tempfile

import numpy as np

from teamform import env, harness, training

logging.basicConfig(level=logging.INFO, format="%(message)s")

world = env.WorldConfig()
baseline = training.random_policy_returns(world, 200, np.random.default_rng(0))
print(f"random policy: {baseline.mean():.3f} per episode")

with tempfile.TemporaryDirectory() as out:
    cfg = training.TrainConfig(total_steps=3000, eval_interval=1000, eval_episodes=8, seed=1)
    result = training.train(cfg, out_dir=out)
    print(open(f"{out}/metrics.csv").read())

reports = harness.evaluate({"oom": result.store, "som": result.store}, episodes=20, seeds=2,
                           cells=[(6, 2)], baseline=True)
print(harness.composition_table(reports))
for r in reports:
    print(f"{r.algo}: teams formed {r.groupings_per_episode:.1f} times per episode, "
          f"blocking-pair rate {r.blocking_pair_rate:.2f}")
