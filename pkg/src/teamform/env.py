"""Grid "escort" task: leaders and followers capture targets while avoiding hazards.

Entities are laid out agents first (leaders, then followers), then targets,
then hazards.  A target is captured when a leader and at least one follower
from that leader's current team stand next to it (Chebyshev distance 1) and
both choose ``interact`` on the same step.  Hazards patrol back and forth
along a row or column and eliminate any agent sharing their cell.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .attention import FOLLOWER, LEADER, NON_AGENT, EntityMatrix
from .errors import ConfigError, ContractError

STAY, UP, DOWN, LEFT, RIGHT, INTERACT = range(6)
ACTION_NAMES = ("stay", "up", "down", "left", "right", "interact")
N_ACTIONS = len(ACTION_NAMES)
MOVES = np.array([[0, 0], [0, 1], [0, -1], [-1, 0], [1, 0], [0, 0]])

KIND_AGENT, KIND_TARGET, KIND_HAZARD = 0, 1, 2
FEATURE_DIM = 10


@dataclass
class WorldConfig:
    grid_size: int = 8
    min_agents: int = 3
    max_agents: int = 5
    leaders: int = 2
    targets: int = 2
    hazards: int = 2
    max_steps: int = 50
    obs_radius: int = 3
    capture_reward: float = 1.0
    completion_bonus: float = 5.0
    step_penalty: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.leaders <= 4:
            raise ConfigError(f"leader count must be in [2, 4], got {self.leaders}")
        if not 1 <= self.min_agents <= self.max_agents:
            raise ConfigError("need 1 <= min_agents <= max_agents")
        if self.leaders >= self.min_agents:
            raise ConfigError("every population needs at least one follower")
        if self.leaders > self.max_agents - self.leaders:
            raise ConfigError("leaders may not outnumber followers in the largest population")
        if self.grid_size < 2 or self.max_steps < 1 or self.obs_radius < 0:
            raise ConfigError("grid_size >= 2, max_steps >= 1, obs_radius >= 0 required")
        if self.max_agents + self.targets + self.hazards > self.grid_size ** 2:
            raise ConfigError("grid too small to place all entities")

    @classmethod
    def from_mapping(cls, values: dict) -> "WorldConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown scenario key {key!r}")
            kwargs[key] = float(raw) if known[key] == "float" else int(raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "WorldConfig":
        values = read_key_values(path)
        return cls.from_mapping({k: v for k, v in values.items() if k in {f.name for f in fields(cls)}})


def read_key_values(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    return values


@dataclass
class WorldState:
    positions: np.ndarray  # (E, 2) int
    kinds: np.ndarray
    roles: np.ndarray
    alive: np.ndarray
    hazard_dirs: np.ndarray  # (E, 2), zero for non-hazards
    agent_count: int
    t: int
    config: WorldConfig
    captured: int = 0

    @property
    def entity_count(self) -> int:
        return len(self.kinds)

    @property
    def agent_alive(self) -> np.ndarray:
        return self.alive[:self.agent_count].copy()

    @property
    def leader_count(self) -> int:
        return int(np.sum(self.roles == LEADER))

    @property
    def targets_remaining(self) -> int:
        return int(np.sum((self.kinds == KIND_TARGET) & self.alive))

    def copy(self) -> "WorldState":
        return replace(self, positions=self.positions.copy(), alive=self.alive.copy(),
                       hazard_dirs=self.hazard_dirs.copy())

    def digest(self) -> str:
        h = hashlib.sha1()
        for arr in (self.positions, self.alive.astype(np.int8), np.array([self.t])):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


@dataclass
class StepResult:
    entities: EntityMatrix
    observability: np.ndarray
    reward: float
    terminal: bool
    alive: np.ndarray
    timeout: bool = False
    captures: int = 0


def entity_features(state: WorldState) -> np.ndarray:
    cfg = state.config
    n = state.entity_count
    feats = np.zeros((n, FEATURE_DIM))
    feats[:, 0:2] = state.positions / max(cfg.grid_size - 1, 1)
    feats[np.arange(n), 2 + state.kinds] = 1.0
    feats[:, 5] = state.alive
    feats[:, 6] = state.targets_remaining / max(cfg.targets, 1)
    feats[:, 7:9] = state.hazard_dirs
    feats[:, 9] = state.t / cfg.max_steps
    feats[~state.alive, 0:2] = 0.0
    return feats


def entity_matrix(state: WorldState) -> EntityMatrix:
    return EntityMatrix(entity_features(state), state.roles.copy(), state.agent_count)


def observation_mask(state: WorldState, radius: int) -> np.ndarray:
    """Chebyshev-radius visibility of every entity for every agent."""
    agents = state.positions[:state.agent_count]
    dist = np.abs(agents[:, None, :] - state.positions[None, :, :]).max(axis=-1)
    mask = (dist <= radius) & state.alive[None, :]
    idx = np.arange(state.agent_count)
    mask[idx, idx] = True
    return mask.astype(float)


def reset(config: WorldConfig, rng: np.random.Generator,
          agent_count: int | None = None) -> tuple[WorldState, EntityMatrix, np.ndarray]:
    """Random placement; the first ``config.leaders`` agents lead."""
    if agent_count is None:
        agent_count = int(rng.integers(config.min_agents, config.max_agents + 1))
    if agent_count <= config.leaders:
        raise ConfigError(f"{agent_count} agents cannot host {config.leaders} leaders and a follower")
    n = agent_count + config.targets + config.hazards
    if n > config.grid_size ** 2:
        raise ConfigError("grid too small to place all entities")
    cells = rng.choice(config.grid_size ** 2, size=n, replace=False)
    positions = np.stack([cells % config.grid_size, cells // config.grid_size], axis=1)
    kinds = np.array([KIND_AGENT] * agent_count + [KIND_TARGET] * config.targets
                     + [KIND_HAZARD] * config.hazards)
    roles = np.array([LEADER] * config.leaders + [FOLLOWER] * (agent_count - config.leaders)
                     + [NON_AGENT] * (config.targets + config.hazards))
    dirs = np.zeros((n, 2), dtype=int)
    for i in np.flatnonzero(kinds == KIND_HAZARD):
        dirs[i] = MOVES[int(rng.integers(UP, RIGHT + 1))]
    state = WorldState(positions.astype(int), kinds, roles, np.ones(n, dtype=bool), dirs,
                       agent_count, 0, config)
    return state, entity_matrix(state), observation_mask(state, config.obs_radius)


def _move_agents(state: WorldState, actions: np.ndarray) -> None:
    g = state.config.grid_size
    blocked = {tuple(p) for p, k, a in zip(state.positions, state.kinds, state.alive)
               if k == KIND_TARGET and a}
    current = {i: tuple(state.positions[i]) for i in range(state.agent_count) if state.alive[i]}
    final: dict[int, tuple] = {}
    for i in sorted(current):
        want = tuple(np.add(current[i], MOVES[actions[i]]))
        ok = (0 <= want[0] < g and 0 <= want[1] < g and want not in blocked
              and want not in final.values()
              and all(current[j] != want for j in current if j > i))
        final[i] = want if ok else current[i]
    for i, pos in final.items():
        state.positions[i] = pos


def _move_hazards(state: WorldState) -> None:
    g = state.config.grid_size
    for i in np.flatnonzero((state.kinds == KIND_HAZARD) & state.alive):
        nxt = state.positions[i] + state.hazard_dirs[i]
        if np.any(nxt < 0) or np.any(nxt >= g):
            state.hazard_dirs[i] = -state.hazard_dirs[i]
            nxt = state.positions[i] + state.hazard_dirs[i]
        state.positions[i] = nxt


def step(state: WorldState, joint_action, teams: dict | None = None,
         rng: np.random.Generator | None = None) -> tuple[WorldState, StepResult]:
    """Advance one tick.  ``teams`` maps leader index -> follower indices.

    Actions of dead agents are ignored.  Transitions are deterministic; ``rng``
    is accepted for interface symmetry.
    """
    if state.t >= state.config.max_steps:
        raise ContractError("episode already finished")
    actions = np.asarray(joint_action, dtype=int)
    if actions.shape != (state.agent_count,):
        raise ContractError(f"expected {state.agent_count} actions, got shape {actions.shape}")
    if np.any((actions < 0) | (actions >= N_ACTIONS)):
        raise ContractError("action index out of range")
    cfg = state.config
    s = state.copy()
    alive = s.alive[:s.agent_count]
    actions = np.where(alive, actions, STAY)

    _move_agents(s, actions)

    reward = -cfg.step_penalty
    captures = 0
    interacting = alive & (actions == INTERACT)
    for tgt in np.flatnonzero((s.kinds == KIND_TARGET) & s.alive):
        near = np.abs(s.positions[:s.agent_count] - s.positions[tgt]).max(axis=1) == 1
        ready = interacting & near
        for leader, members in (teams or {}).items():
            if ready[leader] and any(ready[f] for f in members):
                s.alive[tgt] = False
                captures += 1
                break
    reward += cfg.capture_reward * captures
    s.captured += captures

    _move_hazards(s)
    hazard_cells = {tuple(p) for p, k, a in zip(s.positions, s.kinds, s.alive)
                    if k == KIND_HAZARD and a}
    for i in range(s.agent_count):
        if s.alive[i] and tuple(s.positions[i]) in hazard_cells:
            s.alive[i] = False

    s.t += 1
    done_all = s.targets_remaining == 0
    if done_all:
        reward += cfg.completion_bonus
    timeout = s.t >= cfg.max_steps and not done_all
    terminal = done_all or timeout
    result = StepResult(entity_matrix(s), observation_mask(s, cfg.obs_radius), reward,
                        terminal, s.agent_alive, timeout=timeout, captures=captures)
    return s, result


def render(state: WorldState, teams: dict | None = None) -> str:
    """ASCII frame: leaders as letters, followers as their leader's letter in lower case."""
    g = state.config.grid_size
    grid = [["." for _ in range(g)] for _ in range(g)]
    owner = {f: l for l, ms in (teams or {}).items() for f in ms}
    for i in range(state.entity_count):
        if not state.alive[i]:
            continue
        x, y = state.positions[i]
        if state.kinds[i] == KIND_TARGET:
            ch = "T"
        elif state.kinds[i] == KIND_HAZARD:
            ch = "X"
        elif state.roles[i] == LEADER:
            ch = chr(ord("A") + i)
        else:
            ch = chr(ord("a") + owner[i]) if i in owner else "?"
        grid[g - 1 - y][x] = ch
    return "\n".join("".join(row) for row in grid)


@dataclass
class TraceWriter:
    """Line-delimited JSON episode trace, one record per step."""

    path: str
    _fh: object = field(default=None, repr=False)

    def __enter__(self):
        self._fh = open(self.path, "a")
        return self

    def __exit__(self, *exc):
        self._fh.close()

    def write(self, episode: int, state: WorldState, actions, reward: float, teams: dict) -> None:
        record = {
            "episode": episode,
            "t": int(state.t),
            "digest": state.digest(),
            "actions": [int(a) for a in actions],
            "reward": float(reward),
            "grouping": {str(l): [int(f) for f in ms] for l, ms in teams.items()},
            "grid": int(state.config.grid_size),
            "positions": state.positions.tolist(),
            "kinds": state.kinds.tolist(),
            "roles": state.roles.tolist(),
            "alive": state.alive.astype(int).tolist(),
        }
        self._fh.write(json.dumps(record) + "\n")


def render_trace(path) -> list[str]:
    """Text frames reconstructed from a trace file."""
    frames = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            g = rec["grid"]
            cfg = WorldConfig(grid_size=g, max_agents=max(5, len(rec["actions"])),
                              min_agents=3, leaders=2, targets=0, hazards=0)
            n = len(rec["kinds"])
            state = WorldState(np.array(rec["positions"]), np.array(rec["kinds"]),
                               np.array(rec["roles"]), np.array(rec["alive"], dtype=bool),
                               np.zeros((n, 2), dtype=int), len(rec["actions"]), rec["t"], cfg)
            teams = {int(k): v for k, v in rec["grouping"].items()}
            header = (f"episode {rec['episode']} t={rec['t']} reward={rec['reward']:+.2f} "
                      f"actions={[ACTION_NAMES[a] for a in rec['actions']]}")
            frames.append(header + "\n" + render(state, teams))
    return frames
