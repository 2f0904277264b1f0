import json

import numpy as np
import pytest

from teamform import env
from teamform.attention import FOLLOWER, LEADER, NON_AGENT
from teamform.errors import ConfigError, ContractError
from teamform.nets import ModelConfig
from teamform.training import collect_episode, random_policy_returns


def craft(agents, targets=(), hazards=(), leaders=2, grid=8, hazard_dirs=None, max_steps=50):
    """A hand-placed state: agent, target and hazard positions in entity order."""
    cfg = env.WorldConfig(grid_size=grid, min_agents=3, max_agents=max(5, len(agents)),
                          leaders=leaders, targets=len(targets), hazards=len(hazards),
                          max_steps=max_steps)
    positions = np.array(list(agents) + list(targets) + list(hazards), dtype=int)
    kinds = np.array([env.KIND_AGENT] * len(agents) + [env.KIND_TARGET] * len(targets)
                     + [env.KIND_HAZARD] * len(hazards))
    roles = np.array([LEADER] * leaders + [FOLLOWER] * (len(agents) - leaders)
                     + [NON_AGENT] * (len(targets) + len(hazards)))
    dirs = np.zeros((len(positions), 2), dtype=int)
    if hazard_dirs is not None:
        dirs[len(agents) + len(targets):] = hazard_dirs
    return env.WorldState(positions, kinds, roles, np.ones(len(positions), dtype=bool), dirs,
                          len(agents), 0, cfg)


def test_reset_is_seeded():
    cfg = env.WorldConfig()
    a, _, obs_a = env.reset(cfg, np.random.default_rng(4))
    b, _, obs_b = env.reset(cfg, np.random.default_rng(4))
    assert a.digest() == b.digest()
    np.testing.assert_array_equal(obs_a, obs_b)


def test_reset_roles_and_self_visibility():
    state, ents, obs = env.reset(env.WorldConfig(), np.random.default_rng(0), agent_count=5)
    assert list(state.roles[:5]) == [LEADER, LEADER, FOLLOWER, FOLLOWER, FOLLOWER]
    assert np.all(np.diag(obs[:, :5]) == 1)
    assert ents.features.shape[1] == env.FEATURE_DIM


def test_feature_width_is_fixed_across_populations():
    cfg = env.WorldConfig(min_agents=3, max_agents=8)
    widths = {env.reset(cfg, np.random.default_rng(n), agent_count=n)[1].features.shape[1]
              for n in range(4, 9)}
    assert widths == {env.FEATURE_DIM}


def test_grid_too_small():
    with pytest.raises(ConfigError):
        env.WorldConfig(grid_size=2, targets=2, hazards=2)


@pytest.mark.parametrize("kw", [dict(leaders=1), dict(leaders=5, max_agents=10, min_agents=6),
                                dict(leaders=3, min_agents=4, max_agents=5)])
def test_leader_range_enforced(kw):
    with pytest.raises(ConfigError):
        env.WorldConfig(**kw)


def test_all_stay_costs_step_penalty():
    s = craft([(0, 0), (2, 2), (4, 4)], targets=[(7, 7)])
    nxt, res = env.step(s, [env.STAY] * 3, {0: [2], 1: []})
    assert res.reward == pytest.approx(-0.01)
    np.testing.assert_array_equal(nxt.positions, s.positions)
    assert not res.terminal


def test_contested_cell_goes_to_lower_index():
    s = craft([(1, 0), (3, 0), (5, 5)], targets=[(7, 7)])
    nxt, _ = env.step(s, [env.RIGHT, env.LEFT, env.STAY], {0: [2], 1: []})
    assert tuple(nxt.positions[0]) == (2, 0)
    assert tuple(nxt.positions[1]) == (3, 0)


def test_walls_and_targets_block():
    s = craft([(0, 0), (3, 3), (5, 5)], targets=[(3, 4)])
    nxt, _ = env.step(s, [env.LEFT, env.UP, env.STAY], {0: [2], 1: []})
    assert tuple(nxt.positions[0]) == (0, 0)
    assert tuple(nxt.positions[1]) == (3, 3)


def test_capture_needs_same_team_and_interact():
    agents = [(2, 2), (6, 6), (2, 4), (4, 4)]
    s = craft(agents, targets=[(3, 3), (0, 7)])
    acts = [env.INTERACT, env.STAY, env.INTERACT, env.STAY]
    _, res = env.step(s, acts, {0: [3], 1: [2]})
    assert res.captures == 0
    _, res = env.step(s, acts, {0: [2], 1: [3]})
    assert res.captures == 1 and res.reward == pytest.approx(1.0 - 0.01)
    _, res = env.step(s, [env.INTERACT, env.STAY, env.STAY, env.STAY], {0: [2], 1: [3]})
    assert res.captures == 0


def test_last_capture_ends_episode_with_bonus():
    s = craft([(2, 2), (6, 6), (2, 4)], targets=[(3, 3)])
    nxt, res = env.step(s, [env.INTERACT, env.STAY, env.INTERACT], {0: [2], 1: []})
    assert res.terminal and not res.timeout
    assert res.reward == pytest.approx(1.0 + 5.0 - 0.01)
    assert nxt.targets_remaining == 0


def test_timeout_and_finished_episode():
    s = craft([(0, 0), (6, 6), (2, 4)], targets=[(7, 0)], max_steps=1)
    nxt, res = env.step(s, [env.STAY] * 3)
    assert res.terminal and res.timeout
    with pytest.raises(ContractError):
        env.step(nxt, [env.STAY] * 3)


def test_hazard_bounces_and_eliminates():
    s = craft([(6, 0), (0, 5), (0, 6)], hazards=[(7, 0)], hazard_dirs=[(1, 0)])
    nxt, res = env.step(s, [env.STAY] * 3)
    assert tuple(nxt.positions[3]) == (6, 0)
    assert list(res.alive) == [False, True, True]
    nxt2, _ = env.step(nxt, [env.RIGHT, env.STAY, env.STAY])
    assert tuple(nxt2.positions[0]) == (6, 0), "dead agents do not move"


def test_bad_actions_rejected():
    s = craft([(0, 0), (6, 6), (2, 4)])
    with pytest.raises(ContractError):
        env.step(s, [env.STAY] * 2)
    with pytest.raises(ContractError):
        env.step(s, [9, 0, 0])


def test_chebyshev_observability():
    s = craft([(0, 0), (7, 7), (7, 0)], targets=[(2, 1)])
    assert env.observation_mask(s, 2)[0, 3] == 1
    assert env.observation_mask(s, 1)[0, 3] == 0
    only_self = env.observation_mask(s, 0)
    np.testing.assert_array_equal(only_self, np.eye(3, 4))
    full = env.observation_mask(s, 8)
    assert np.all(full == 1)
    s.alive[3] = False
    assert np.all(env.observation_mask(s, 8)[:, 3] == 0)


def test_key_value_config(tmp_path):
    path = tmp_path / "scenario.cfg"
    path.write_text("# scenario\ngrid_size = 6\ntargets = 3  # more\nstep_penalty = 0.02\n")
    cfg = env.WorldConfig.from_file(path)
    assert (cfg.grid_size, cfg.targets, cfg.step_penalty) == (6, 3, 0.02)
    path.write_text("grid_size 6\n")
    with pytest.raises(ConfigError):
        env.WorldConfig.from_file(path)
    with pytest.raises(ConfigError):
        env.WorldConfig.from_mapping({"gird_size": "6"})


def test_trace_round_trip(tmp_path):
    path = tmp_path / "trace.jsonl"
    world = env.WorldConfig(max_steps=5)
    with env.TraceWriter(str(path)) as writer:
        ep = collect_episode(world, None, ModelConfig(), 1.0, "oom", np.random.default_rng(0),
                             trace=writer, policy="random")
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == ep.length
    assert {"digest", "actions", "reward", "grouping"} <= set(records[0])
    frames = env.render_trace(path)
    assert len(frames) == ep.length and frames[0].startswith("episode 0 t=1")


def test_random_policy_mean_is_stable_across_seeds():
    world = env.WorldConfig()
    a = random_policy_returns(world, 1000, np.random.default_rng(101)).mean()
    b = random_policy_returns(world, 1000, np.random.default_rng(202)).mean()
    assert abs(a - b) <= 0.02 * abs(a)
