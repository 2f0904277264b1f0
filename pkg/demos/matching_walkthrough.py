"""Walk through team matching on two hand-built preference tables.

Run with ``python demos/matching_walkthrough.py``.
"""

import numpy as np

from teamform import checks
from teamform.matching import balance_capacities, find_blocking_pairs, match


def show(title, prefs, plan):
    print(f"== {title}")
    print("scores (rows rate columns):")
    print(np.array2string(prefs.scores, precision=2, suppress_small=True))
    print(f"capacities {plan.capacities}")
    for algorithm in ("oom", "som"):
        grouping = match(prefs, algorithm, plan)
        blocking = find_blocking_pairs(grouping, prefs, plan)
        print(f"  {algorithm}: teams {grouping.teams}  blocking pairs {blocking or 'none'}")
    print()


prefs, plan = checks.oom_fixture()
show("rank-driven table", prefs, plan)

# Greedy score matching takes the single best mutual score first. Here that
# strands a leader and follower who would both rather be together.
prefs, plan = checks.som_fixture()
show("score-driven table", prefs, plan)

unstable = 0
for prefs, plan in checks.sweep_instances(200, seed=7):
    unstable += bool(find_blocking_pairs(match(prefs, "som", plan), prefs, plan))
    assert not find_blocking_pairs(match(prefs, "oom", plan), prefs, plan)
print(f"random tables: deferred acceptance always stable, greedy unstable on {unstable}/200")
print(f"five followers over two leaders get capacities {balance_capacities(2, 5).capacities}")
