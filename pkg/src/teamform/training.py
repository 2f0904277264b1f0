"""Episode collection with team formation, episodic replay and the training loop."""

from __future__ import annotations

import csv
import logging
import os
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from . import env
from .attention import extract_preferences
from .batch import Episode, grouping_to_groups, make_batch
from .diffcore import ParameterStore
from .errors import ConfigError, ContractError
from .losses import total_loss
from .matching import (Grouping, PreferenceMatrix, balance_capacities, find_blocking_pairs,
                       match)
from .nets import ModelConfig, augment, init_params, utility_forward

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "episodes", "epsilon", "mean_return", "l_q", "l_aux", "l_sd",
                  "total_loss", "match_algo", "seed"]


class ReplayBuffer:
    """Ring buffer of whole episodes."""

    def __init__(self, capacity: int = 512):
        if capacity < 1:
            raise ContractError("replay capacity must be positive")
        self.capacity = capacity
        self._episodes: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._episodes)

    def add(self, episode: Episode) -> None:
        self._episodes.append(episode)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Episode]:
        if batch_size > len(self._episodes):
            raise ContractError(f"cannot sample {batch_size} episodes from {len(self)}")
        idx = rng.choice(len(self._episodes), size=batch_size, replace=False)
        return [self._episodes[i] for i in idx]


@dataclass
class TeamFormation:
    grouping: Grouping
    blocking_pairs: int
    preferences: PreferenceMatrix | None


def form_teams(store: ParameterStore, cfg: ModelConfig, entities: env.EntityMatrix,
               alive: np.ndarray, algorithm: str) -> TeamFormation:
    """Match the living followers to the living leaders from attention preferences."""
    n_leaders = entities.leader_count
    idx = np.flatnonzero(alive)
    leaders = [int(i) for i in idx if i < n_leaders]
    if not leaders:
        return TeamFormation(Grouping({}), 0, None)
    if len(idx) < 2:
        return TeamFormation(Grouping({leaders[0]: []}), 0, None)
    x = augment(entities.features, entities.roles)
    full = extract_preferences(x, entities.roles, entities.agent_count, store.scope("util.eff"),
                               store.scope("util.att"), cfg.heads)
    prefs = PreferenceMatrix(full.scores[np.ix_(idx, idx)], len(leaders))
    plan = balance_capacities(len(leaders), len(idx) - len(leaders))
    local = match(prefs, algorithm, plan)
    blocking = len(find_blocking_pairs(local, prefs, plan))
    teams = {int(idx[l]): [int(idx[f]) for f in members] for l, members in local.teams.items()}
    return TeamFormation(Grouping(teams), blocking, prefs)


def collect_episode(world: env.WorldConfig, store: ParameterStore, cfg: ModelConfig,
                    epsilon: float, algorithm: str, rng: np.random.Generator,
                    agent_count: int | None = None, episode_id: int = 0,
                    rematch_interval: int = 0, trace: env.TraceWriter | None = None,
                    policy: str = "network") -> Episode:
    """Roll out one episode with epsilon-greedy actions.

    Teams are formed at the first step and re-formed over the survivors after
    any death (and every ``rematch_interval`` steps when positive).  With
    ``policy="random"`` actions are uniform and teams are contiguous balanced
    blocks, which gives the random-policy baseline.
    """
    state, ents, obs = env.reset(world, rng, agent_count)
    n, n_leaders = state.agent_count, state.leader_count
    group_map = rng.permutation(cfg.n_groups)
    hidden = dc.Tensor(np.zeros((n, cfg.hidden)))

    def regroup(t):
        if policy == "random":
            formed = TeamFormation(_contiguous_teams(state.agent_alive, n_leaders), 0, None)
        else:
            formed = form_teams(store, cfg, ents, state.agent_alive, algorithm)
        matchings.append((t, formed.grouping, formed.blocking_pairs))
        return formed.grouping

    matchings: list = []
    grouping = regroup(0)
    groups = grouping_to_groups(grouping, state.agent_alive, n_leaders)
    rec = {"feats": [ents.features], "obs": [obs], "alive": [state.agent_alive],
           "entity_alive": [state.alive.copy()], "groups": [groups],
           "actions": [], "rewards": [], "terminal": []}
    with dc.no_grad():
        while True:
            alive = state.agent_alive
            if policy == "random":
                actions = rng.integers(0, cfg.n_actions, n)
            else:
                out = utility_forward(store, cfg, augment(ents.features, ents.roles), ents.roles,
                                      obs, hidden, groups, group_map, n, with_aux=False)
                hidden = out.hidden
                greedy = np.argmax(out.q.data, axis=-1)
                explore = rng.random(n) < epsilon
                actions = np.where(explore, rng.integers(0, cfg.n_actions, n), greedy)
            actions = np.where(alive, actions, env.STAY)
            state, res = env.step(state, actions, grouping.teams)
            if trace is not None:
                trace.write(episode_id, state, actions, res.reward, grouping.teams)
            ents, obs = res.entities, res.observability
            rec["actions"].append(actions)
            rec["rewards"].append(res.reward)
            rec["terminal"].append(res.terminal and not res.timeout)
            died = np.any(alive & ~res.alive)
            periodic = rematch_interval > 0 and state.t % rematch_interval == 0
            if not res.terminal and (died or periodic):
                grouping = regroup(state.t)
            groups = grouping_to_groups(grouping, res.alive, n_leaders)
            rec["feats"].append(ents.features)
            rec["obs"].append(obs)
            rec["alive"].append(res.alive)
            rec["entity_alive"].append(state.alive.copy())
            rec["groups"].append(groups)
            if res.terminal:
                break
    return Episode(
        feats=np.array(rec["feats"]), roles=state.roles.copy(),
        obs=np.array(rec["obs"], dtype=bool), alive=np.array(rec["alive"], dtype=bool),
        entity_alive=np.array(rec["entity_alive"], dtype=bool),
        actions=np.array(rec["actions"], dtype=int), rewards=np.array(rec["rewards"]),
        terminal=np.array(rec["terminal"], dtype=bool), groups=np.array(rec["groups"]),
        group_map=group_map, agent_count=n, leader_count=n_leaders, episode_id=episode_id,
        matchings=matchings, captured=state.captured,
        all_captured=state.targets_remaining == 0 and world.targets > 0)


def _contiguous_teams(alive: np.ndarray, n_leaders: int) -> Grouping:
    idx = np.flatnonzero(alive)
    leaders = [int(i) for i in idx if i < n_leaders]
    followers = [int(i) for i in idx if i >= n_leaders]
    if not leaders:
        return Grouping({})
    plan = balance_capacities(len(leaders), len(followers))
    teams, pos = {}, 0
    for l, cap in zip(leaders, plan.capacities):
        teams[l] = followers[pos:pos + cap]
        pos += cap
    return Grouping(teams)


def random_policy_returns(world: env.WorldConfig, episodes: int, rng: np.random.Generator,
                          cfg: ModelConfig | None = None) -> np.ndarray:
    cfg = cfg or ModelConfig()
    return np.array([collect_episode(world, None, cfg, 1.0, "oom", rng, policy="random").total_return
                     for _ in range(episodes)])


@dataclass
class TrainConfig:
    total_steps: int = 50_000
    batch_size: int = 16
    buffer_episodes: int = 512
    gamma: float = 0.99
    lam: float = 0.5
    learning_rate: float = 5e-4
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    target_sync: int = 200
    rematch_interval: int = 0
    updates_per_episode: int = 1
    grad_clip: float = 10.0
    eval_interval: int = 5_000
    eval_episodes: int = 32
    algorithm: str = "oom"
    seed: int = 0
    dtype: str = "float32"
    world: env.WorldConfig = field(default_factory=env.WorldConfig)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.algorithm not in ("oom", "som"):
            raise ConfigError(f"unknown matching algorithm {self.algorithm!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def epsilon(self, step: int) -> float:
        horizon = max(self.eps_fraction * self.total_steps, 1.0)
        frac = min(step / horizon, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls) if f.name != "world"}
        world_keys = {f.name for f in fields(env.WorldConfig)}
        kwargs, world = {}, {}
        for key, raw in values.items():
            if key in known:
                typ = known[key]
                kwargs[key] = raw if typ == "str" else (float(raw) if typ == "float" else int(raw))
            elif key in world_keys:
                world[key] = raw
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if "seed" in kwargs and "seed" not in world:
            world["seed"] = kwargs["seed"]
        return cls(world=env.WorldConfig.from_mapping(world), **kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_mapping(env.read_key_values(path))


@dataclass
class TrainResult:
    store: ParameterStore
    target: ParameterStore
    metrics: list
    episodes: int
    optimizer_steps: int


def greedy_returns(world: env.WorldConfig, store: ParameterStore, cfg: ModelConfig,
                   algorithm: str, episodes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919])
    return np.array([collect_episode(world, store, cfg, 0.0, algorithm, rng).total_return
                     for _ in range(episodes)])


def train(config: TrainConfig, out_dir: str | None = None,
          model_cfg: ModelConfig | None = None) -> TrainResult:
    """Alternate episode collection and optimizer steps for ``config.total_steps`` env steps."""
    cfg = model_cfg or ModelConfig()
    root = np.random.SeedSequence(config.seed)
    init_rng, act_rng, batch_rng = (np.random.default_rng(s) for s in root.spawn(3))
    dtype = np.float32 if config.dtype == "float32" else np.float64
    with dc.default_dtype(dtype):
        store = init_params(cfg, init_rng).astype(dtype)
        target = store.copy()
        buffer = ReplayBuffer(config.buffer_episodes)
        metrics: list = []
        pending: list = []
        steps = episodes = updates = 0
        next_eval = config.eval_interval
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            metrics_path = os.path.join(out_dir, "metrics.csv")
            with open(metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)
        while steps < config.total_steps:
            eps = config.epsilon(steps)
            ep = collect_episode(config.world, store, cfg, eps, config.algorithm, act_rng,
                                 episode_id=episodes, rematch_interval=config.rematch_interval)
            buffer.add(ep)
            steps += ep.length
            episodes += 1
            if len(buffer) >= config.batch_size:
                for _ in range(config.updates_per_episode):
                    batch = make_batch(buffer.sample(config.batch_size, batch_rng), batch_rng)
                    report = total_loss(batch, store, target, cfg, config.gamma, config.lam)
                    values = report.values()
                    if not np.isfinite(values["total_loss"]):
                        if out_dir:
                            dc.save_checkpoint(store, os.path.join(out_dir, "diagnostic.tfrm"))
                        raise FloatingPointError(f"non-finite loss at step {steps}: {values}")
                    report.total.backward()
                    dc.clip_grad_norm(store, config.grad_clip)
                    dc.optimizer_step(store, config.learning_rate)
                    updates += 1
                    pending.append(values)
                    if updates % config.target_sync == 0:
                        dc.sync_target(store, target)
            if steps >= next_eval or steps >= config.total_steps:
                next_eval += config.eval_interval
                returns = greedy_returns(config.world, store, cfg, config.algorithm,
                                         config.eval_episodes, config.seed)
                row = {"step": steps, "episodes": episodes, "epsilon": round(eps, 6),
                       "mean_return": float(np.mean(returns))}
                for key in ("l_q", "l_aux", "l_sd", "total_loss"):
                    row[key] = float(np.mean([p[key] for p in pending])) if pending else float("nan")
                row["match_algo"] = config.algorithm
                row["seed"] = config.seed
                pending = []
                metrics.append(row)
                log.info("step %d episodes %d eps %.3f return %.3f loss %.4f", steps, episodes,
                         eps, row["mean_return"], row["total_loss"])
                if out_dir:
                    with open(metrics_path, "a", newline="") as fh:
                        csv.writer(fh).writerow([row[k] for k in METRICS_HEADER])
                    dc.save_checkpoint(store, os.path.join(out_dir, f"checkpoint_{steps}.tfrm"))
                    dc.save_checkpoint(store, os.path.join(out_dir, "model.tfrm"))
    return TrainResult(store, target, metrics, episodes, updates)
