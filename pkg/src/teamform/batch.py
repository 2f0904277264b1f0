"""Episode records and padded training batches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import NON_AGENT, sample_complementary_masks
from .matching import Grouping


@dataclass
class Transition:
    entities: np.ndarray
    observability: np.ndarray
    actions: np.ndarray
    reward: float
    next_entities: np.ndarray
    next_observability: np.ndarray
    terminal: bool
    grouping: Grouping
    alive: np.ndarray
    episode_id: int
    step: int


@dataclass
class Episode:
    """One trajectory.  Arrays indexed by time hold ``length + 1`` rows for
    per-step observations and ``length`` rows for actions and rewards."""

    feats: np.ndarray        # (T+1, E, d)
    roles: np.ndarray        # (E,)
    obs: np.ndarray          # (T+1, A, E) bool
    alive: np.ndarray        # (T+1, A) bool
    entity_alive: np.ndarray  # (T+1, E) bool
    actions: np.ndarray      # (T, A) int
    rewards: np.ndarray      # (T,)
    terminal: np.ndarray     # (T,) bool; true only where no bootstrap is allowed
    groups: np.ndarray       # (T+1, A) team index per agent, -1 when dead
    group_map: np.ndarray    # (K,) random relabelling of team index -> one-hot slot
    agent_count: int
    leader_count: int
    episode_id: int = 0
    matchings: list = field(default_factory=list)  # (t, Grouping, blocking pair count)
    captured: int = 0
    all_captured: bool = False

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))

    def grouping_at(self, t: int) -> Grouping:
        return groups_to_grouping(self.groups[t], self.leader_count)

    def transitions(self):
        for t in range(self.length):
            yield Transition(self.feats[t], self.obs[t], self.actions[t], float(self.rewards[t]),
                             self.feats[t + 1], self.obs[t + 1], bool(self.terminal[t]),
                             self.grouping_at(t), self.alive[t], self.episode_id, t)


def groups_to_grouping(groups: np.ndarray, leader_count: int) -> Grouping:
    teams = {l: [] for l in range(leader_count) if groups[l] >= 0}
    for a in range(leader_count, len(groups)):
        g = int(groups[a])
        if g in teams:
            teams[g].append(a)
    return Grouping(teams)


def grouping_to_groups(grouping: Grouping, alive: np.ndarray, leader_count: int) -> np.ndarray:
    """Team index per agent; agents without a living leader share team 0."""
    groups = np.full(len(alive), -1, dtype=int)
    for l, members in grouping.teams.items():
        groups[l] = l
        groups[list(members)] = l
    orphans = np.asarray(alive, dtype=bool) & (groups < 0)
    groups[orphans] = 0
    groups[~np.asarray(alive, dtype=bool)] = -1
    return groups


@dataclass
class EpisodeBatch:
    feats: np.ndarray         # (B, T+1, E, d)
    roles: np.ndarray         # (B, E)
    obs: np.ndarray           # (B, T+1, A, E) bool
    in_subset: np.ndarray     # (B, T+1, E) bool
    alive: np.ndarray         # (B, T+1, A) bool
    entity_alive: np.ndarray  # (B, T+1, E) bool
    actions: np.ndarray       # (B, T, A) int
    rewards: np.ndarray       # (B, T)
    terminal: np.ndarray      # (B, T) bool
    valid: np.ndarray         # (B, T) bool
    groups: np.ndarray        # (B, T+1, A)
    group_map: np.ndarray     # (B, K)
    n_agents: int

    @property
    def size(self) -> int:
        return self.rewards.shape[0]

    def masks(self) -> MaskSetBatch:
        return MaskSetBatch.from_batch(self)


@dataclass
class MaskSetBatch:
    observability: np.ndarray
    in_mask: np.ndarray
    out_mask: np.ndarray
    hyper_all: np.ndarray
    hyper_in: np.ndarray
    hyper_out: np.ndarray

    @classmethod
    def from_batch(cls, b: EpisodeBatch) -> "MaskSetBatch":
        ms = sample_complementary_masks(b.obs, None, in_subset=b.in_subset)
        n_agents, n_ent = b.obs.shape[-2:]
        own = np.arange(n_agents)[:, None] == np.arange(n_ent)[None, :]
        visible = np.broadcast_to(b.entity_alive[..., None, :], b.obs.shape) | own
        same = b.in_subset[..., None, :] | own
        return cls(ms.observability.astype(bool), ms.in_mask.astype(bool), ms.out_mask.astype(bool),
                   visible, visible & same, visible & ~same)


def make_batch(episodes: list, rng: np.random.Generator) -> EpisodeBatch:
    """Pad episodes to common (time, agent, entity) sizes and draw fresh in/out subsets.

    Padding agents are inserted after each episode's real agents so that the
    non-agent entities follow all agent rows; padded rows are dead.
    """
    B = len(episodes)
    T = max(ep.length for ep in episodes)
    A = max(ep.agent_count for ep in episodes)
    n_other = max(len(ep.roles) - ep.agent_count for ep in episodes)
    E = A + n_other
    d = episodes[0].feats.shape[-1]
    feats = np.zeros((B, T + 1, E, d))
    roles = np.full((B, E), NON_AGENT, dtype=int)
    obs = np.zeros((B, T + 1, A, E), dtype=bool)
    alive = np.zeros((B, T + 1, A), dtype=bool)
    ent_alive = np.zeros((B, T + 1, E), dtype=bool)
    actions = np.zeros((B, T, A), dtype=int)
    rewards = np.zeros((B, T))
    terminal = np.zeros((B, T), dtype=bool)
    valid = np.zeros((B, T), dtype=bool)
    groups = np.full((B, T + 1, A), -1, dtype=int)
    group_map = np.zeros((B, episodes[0].group_map.shape[0]), dtype=int)
    idx = np.arange(A)
    for i, ep in enumerate(episodes):
        L, n = ep.length, ep.agent_count
        m = len(ep.roles) - n
        ent_index = np.concatenate([np.arange(n), A + np.arange(m)])
        feats[i, :L + 1][:, ent_index] = ep.feats
        roles[i, ent_index] = ep.roles
        obs[i, :L + 1, :n][:, :, ent_index] = ep.obs
        alive[i, :L + 1, :n] = ep.alive
        ent_alive[i, :L + 1][:, ent_index] = ep.entity_alive
        actions[i, :L, :n] = ep.actions
        rewards[i, :L] = ep.rewards
        terminal[i, :L] = ep.terminal
        valid[i, :L] = True
        groups[i, :L + 1, :n] = ep.groups
        group_map[i] = ep.group_map
    obs[:, :, idx, idx] = True
    in_subset = rng.random((B, T + 1, E)) < 0.5
    return EpisodeBatch(feats, roles, obs, in_subset, alive, ent_alive, actions, rewards,
                        terminal, valid, groups, group_map, A)
