"""Bilateral leader/follower team formation.

Agents ``0..k-1`` are leaders, the rest followers.  Preferences come from a
real score matrix ``S`` where row ``i`` scores every other agent from ``i``'s
point of view.  Equal scores rank the lower index first, on both sides.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SizeLimitError

MAX_ENUM_LEADERS = 3
MAX_ENUM_FOLLOWERS = 7


@dataclass
class PreferenceMatrix:
    scores: np.ndarray
    leader_count: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        n = self.scores.shape[0]
        if self.scores.ndim != 2 or self.scores.shape != (n, n):
            raise ContractError(f"score matrix must be square, got {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ContractError("score matrix has non-finite entries")
        if not 1 <= self.leader_count <= n:
            raise ContractError(f"need 1 <= leaders <= agents, got {self.leader_count} of {n}")

    @property
    def agent_count(self) -> int:
        return self.scores.shape[0]

    @property
    def leaders(self) -> range:
        return range(self.leader_count)

    @property
    def followers(self) -> range:
        return range(self.leader_count, self.agent_count)

    def leader_ranking(self, leader: int) -> list[int]:
        """Followers ordered best-first by ``leader``'s scores."""
        fs = list(self.followers)
        return sorted(fs, key=lambda f: (-self.scores[leader, f], f))

    def follower_rank(self, follower: int) -> dict[int, int]:
        """Position of each leader in ``follower``'s list (0 = best)."""
        ls = sorted(self.leaders, key=lambda l: (-self.scores[follower, l], l))
        return {l: r for r, l in enumerate(ls)}

    def to_record(self) -> dict:
        return {"agents": self.agent_count, "leaders": self.leader_count,
                "scores": self.scores.reshape(-1).tolist()}

    @classmethod
    def from_record(cls, record: dict, leaders: int | None = None) -> "PreferenceMatrix":
        n = int(record["agents"])
        scores = np.asarray(record["scores"], dtype=float)
        if scores.size != n * n:
            raise ContractError(f"expected {n * n} scores, got {scores.size}")
        k = int(record["leaders"]) if leaders is None else leaders
        return cls(scores.reshape(n, n), k)

    def dumps(self) -> str:
        return json.dumps(self.to_record())


@dataclass
class CapacityPlan:
    capacities: list

    @property
    def total(self) -> int:
        return sum(self.capacities)


@dataclass
class Grouping:
    """Teams keyed by leader index; each value lists that leader's followers."""

    teams: dict = field(default_factory=dict)

    def team_of(self, follower: int) -> int | None:
        for leader, members in self.teams.items():
            if follower in members:
                return leader
        return None

    def assignment(self) -> dict:
        return {f: l for l, members in self.teams.items() for f in members}

    def canonical(self) -> tuple:
        return tuple(sorted((l, tuple(sorted(m))) for l, m in self.teams.items()))

    def __eq__(self, other):
        return isinstance(other, Grouping) and self.canonical() == other.canonical()

    def __hash__(self):
        return hash(self.canonical())

    def to_record(self) -> dict:
        return {"teams": [{"leader": int(l), "followers": [int(f) for f in m]}
                          for l, m in sorted(self.teams.items())]}

    def validate(self, prefs: PreferenceMatrix, plan: CapacityPlan) -> None:
        seen = []
        for l, members in self.teams.items():
            if l not in prefs.leaders:
                raise ContractError(f"team key {l} is not a leader")
            if len(members) > plan.capacities[l]:
                raise ContractError(f"leader {l} exceeds capacity {plan.capacities[l]}")
            seen.extend(members)
        if sorted(seen) != list(prefs.followers):
            raise ContractError("every follower must appear in exactly one team")


def balance_capacities(leader_count: int, follower_count: int) -> CapacityPlan:
    """Near-equal team sizes; the first ``F mod L`` leaders take the larger share."""
    if leader_count < 1:
        raise ContractError("at least one leader is required")
    if follower_count < 0:
        raise ContractError("follower count must be non-negative")
    base, extra = divmod(follower_count, leader_count)
    return CapacityPlan([base + 1 if i < extra else base for i in range(leader_count)])


def _check_inputs(prefs: PreferenceMatrix, plan: CapacityPlan) -> None:
    if len(plan.capacities) != prefs.leader_count:
        raise ContractError("capacity plan length differs from leader count")
    if any(c < 0 for c in plan.capacities):
        raise ContractError("capacities must be non-negative")
    if plan.total != len(prefs.followers):
        raise ContractError(f"capacities sum to {plan.total}, expected {len(prefs.followers)}")


def oom_match(prefs: PreferenceMatrix, plan: CapacityPlan, stats: dict | None = None) -> Grouping:
    """Leader-proposing deferred acceptance (order oriented, stable).

    ``stats`` (optional) receives the number of proposals made.
    """
    _check_inputs(prefs, plan)
    rankings = {l: prefs.leader_ranking(l) for l in prefs.leaders}
    follower_rank = {f: prefs.follower_rank(f) for f in prefs.followers}
    next_choice = {l: 0 for l in prefs.leaders}
    teams = {l: [] for l in prefs.leaders}
    holder: dict[int, int] = {}
    proposals = 0

    def eligible(l):
        return len(teams[l]) < plan.capacities[l] and next_choice[l] < len(rankings[l])

    active = [l for l in prefs.leaders if eligible(l)]
    while active:
        l = active[0]
        f = rankings[l][next_choice[l]]
        next_choice[l] += 1
        proposals += 1
        current = holder.get(f)
        if current is None:
            teams[l].append(f)
            holder[f] = l
        elif follower_rank[f][l] < follower_rank[f][current]:
            teams[current].remove(f)
            teams[l].append(f)
            holder[f] = l
        active = [x for x in prefs.leaders if eligible(x)]
    if stats is not None:
        stats["proposals"] = proposals
    return Grouping(teams)


def som_match(prefs: PreferenceMatrix, plan: CapacityPlan) -> Grouping:
    """Greedy mutual-score assignment, followers in ascending index order."""
    _check_inputs(prefs, plan)
    S = prefs.scores
    teams = {l: [] for l in prefs.leaders}
    for f in prefs.followers:
        best_score, best_leader = -np.inf, None
        for l in prefs.leaders:
            if len(teams[l]) < plan.capacities[l]:
                mutual = S[f, l] + S[l, f]
                if mutual > best_score:
                    best_score, best_leader = mutual, l
        if best_leader is not None:
            teams[best_leader].append(f)
    return Grouping(teams)


MATCHERS = {"oom": oom_match, "som": som_match}


def match(prefs: PreferenceMatrix, algorithm: str, plan: CapacityPlan | None = None) -> Grouping:
    if algorithm not in MATCHERS:
        raise ContractError(f"unknown matching algorithm {algorithm!r}")
    if plan is None:
        plan = balance_capacities(prefs.leader_count, len(prefs.followers))
    return MATCHERS[algorithm](prefs, plan)


def find_blocking_pairs(grouping: Grouping, prefs: PreferenceMatrix,
                        plan: CapacityPlan) -> list[tuple[int, int]]:
    """Every (leader, follower) pair that would rather be together."""
    S = prefs.scores
    assigned = grouping.assignment()
    blocking = []
    for f in prefs.followers:
        rank_f = prefs.follower_rank(f)
        current = assigned.get(f)
        for l in prefs.leaders:
            if l == current:
                continue
            if current is not None and rank_f[l] > rank_f[current]:
                continue
            team = grouping.teams.get(l, [])
            if len(team) < plan.capacities[l]:
                blocking.append((l, f))
                continue
            # l prefers f to its worst member (lower index wins ties)
            if any((-S[l, f], f) < (-S[l, m], m) for m in team):
                blocking.append((l, f))
    return blocking


def enumerate_stable_matchings(prefs: PreferenceMatrix, plan: CapacityPlan) -> list[Grouping]:
    """All capacity-respecting groupings without a blocking pair (brute force)."""
    _check_inputs(prefs, plan)
    leaders, followers = list(prefs.leaders), list(prefs.followers)
    if len(leaders) > MAX_ENUM_LEADERS or len(followers) > MAX_ENUM_FOLLOWERS:
        raise SizeLimitError(
            f"enumeration limited to {MAX_ENUM_LEADERS} leaders and "
            f"{MAX_ENUM_FOLLOWERS} followers, got {len(leaders)} and {len(followers)}")
    caps = plan.capacities
    stable = []
    for assignment in itertools.product(leaders, repeat=len(followers)):
        counts = [0] * len(leaders)
        for l in assignment:
            counts[l] += 1
        if any(c > cap for c, cap in zip(counts, caps)):
            continue
        teams = {l: [] for l in leaders}
        for f, l in zip(followers, assignment):
            teams[l].append(f)
        grouping = Grouping(teams)
        if not find_blocking_pairs(grouping, prefs, plan):
            stable.append(grouping)
    return stable


def random_instance(rng: np.random.Generator, leaders: int, followers: int) -> tuple[PreferenceMatrix, CapacityPlan]:
    """I.i.d. uniform scores with a balanced capacity plan."""
    n = leaders + followers
    prefs = PreferenceMatrix(rng.random((n, n)), leaders)
    return prefs, balance_capacities(leaders, followers)
