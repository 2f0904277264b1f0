"""Entity-wise feedforward layers and masked multi-head attention.

All functions accept arrays with arbitrary leading batch axes; the trailing
axes are (entities, features) for entity matrices and (agents, entities) for
masks.  Agents always occupy the first rows of an entity matrix, leaders
first among them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, DimensionError
from .matching import PreferenceMatrix

LEADER, FOLLOWER, NON_AGENT = 0, 1, 2
ROLE_NAMES = ("leader", "follower", "non_agent")


@dataclass
class EntityMatrix:
    features: np.ndarray
    roles: np.ndarray
    agent_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.roles = np.asarray(self.roles, dtype=int)
        n_ent = self.features.shape[-2]
        if self.roles.shape != (n_ent,):
            raise ContractError("one role tag per entity is required")
        if not 0 < self.agent_count <= n_ent:
            raise ContractError("agent count must be within 1..|E|")
        agent_roles = self.roles[:self.agent_count]
        if np.any(agent_roles == NON_AGENT) or np.any(self.roles[self.agent_count:] != NON_AGENT):
            raise ContractError("agents must occupy the first rows")
        if np.any(np.diff(agent_roles) < 0):
            raise ContractError("leaders must precede followers")

    @property
    def entity_count(self) -> int:
        return self.features.shape[-2]

    @property
    def leader_count(self) -> int:
        return int(np.sum(self.roles == LEADER))

    def augment(self) -> "AugmentedEntityMatrix":
        return AugmentedEntityMatrix(augment_features(self.features, self.roles))


@dataclass
class AugmentedEntityMatrix:
    features: np.ndarray


def augment_features(features: np.ndarray, roles: np.ndarray) -> np.ndarray:
    """Append a (leader, follower, non-agent) one-hot to every entity row."""
    features = np.asarray(features)
    onehot = np.eye(3)[np.asarray(roles, dtype=int)]
    onehot = np.broadcast_to(onehot, features.shape[:-1] + (3,))
    return np.concatenate([features, onehot], axis=-1)


@dataclass
class MaskSet:
    observability: np.ndarray
    in_mask: np.ndarray
    out_mask: np.ndarray
    in_subset: np.ndarray | None = None

    def validate(self) -> None:
        obs = self.observability.astype(bool)
        inn = self.in_mask.astype(bool)
        out = self.out_mask.astype(bool)
        if np.any(inn & ~obs) or np.any(out & ~obs):
            raise ContractError("in/out masks must lie inside the observability mask")
        if np.any(inn & out):
            raise ContractError("in and out masks overlap")
        if np.any((inn | out) != obs):
            raise ContractError("in and out masks must cover the observability mask")
        n_agents = obs.shape[-2]
        diag = np.arange(n_agents)
        if np.any(obs[..., diag, diag] & ~inn[..., diag, diag]):
            raise ContractError("an agent must be in its own in-subset")


@dataclass
class AttentionOutput:
    embeddings: Tensor
    weights: Tensor


def self_mask(n_agents: int, n_entities: int) -> np.ndarray:
    """``[a, e]`` true iff entity ``e`` is agent ``a`` itself."""
    return np.arange(n_agents)[:, None] == np.arange(n_entities)[None, :]


def sample_complementary_masks(observability: np.ndarray, rng: np.random.Generator,
                               in_subset: np.ndarray | None = None) -> MaskSet:
    """Split each agent's observable entities into random in/out subsets.

    One fair coin per entity assigns it to the in-subset; from its own point of
    view every agent is in the in-subset.  ``in_subset`` overrides the draw.
    """
    obs = np.asarray(observability).astype(bool)
    n_agents, n_ent = obs.shape[-2:]
    diag = np.arange(n_agents)
    if not np.all(obs[..., diag, diag]):
        raise ContractError("every agent must observe itself")
    if in_subset is None:
        in_subset = rng.random(obs.shape[:-2] + (n_ent,)) < 0.5
    in_subset = np.asarray(in_subset, dtype=bool)
    same = in_subset[..., None, :] | self_mask(n_agents, n_ent)
    return MaskSet(obs.astype(float), (obs & same).astype(float),
                   (obs & ~same).astype(float), in_subset)


def init_entity_ff(store: dc.ParameterStore, prefix: str, in_dim: int, out_dim: int,
                   rng: np.random.Generator) -> None:
    store.add(f"{prefix}.w", glorot(rng, in_dim, out_dim))
    store.add(f"{prefix}.b", np.zeros(out_dim))


def init_mha(store: dc.ParameterStore, prefix: str, dim: int, rng: np.random.Generator) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{name}", glorot(rng, dim, dim))
    store.add(f"{prefix}.bo", np.zeros(dim))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def entity_ff(x, params: dict) -> Tensor:
    """Same affine map + ELU applied to every entity row."""
    x = dc.as_tensor(x)
    w, b = params["w"], params["b"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"entity width {x.shape[-1]} does not match layer input {w.shape[0]}")
    return dc.elu(dc.matmul(x, w) + b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, dim = x.shape
    x = dc.reshape(x, tuple(lead) + (n, heads, dim // heads))
    return dc.swapaxes(x, -2, -3)


def attention_logits(queries, keys_values, params: dict, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product scores ``(..., heads, A, E)`` and split values."""
    queries = dc.as_tensor(queries)
    keys_values = dc.as_tensor(keys_values)
    dim = queries.shape[-1]
    if dim % heads:
        raise DimensionError(f"width {dim} is not divisible by {heads} heads")
    q = _split_heads(dc.matmul(queries, params["wq"]), heads)
    k = _split_heads(dc.matmul(keys_values, params["wk"]), heads)
    v = _split_heads(dc.matmul(keys_values, params["wv"]), heads)
    logits = dc.matmul(q, dc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dim // heads))
    return logits, v


def attend(logits: Tensor, values: Tensor, mask, params: dict) -> AttentionOutput:
    """Masked softmax over entities, weighted sum, head merge and projection."""
    mask = np.asarray(mask, dtype=bool)
    mask = np.broadcast_to(np.expand_dims(mask, -3), logits.shape)
    weights = dc.softmax_masked(logits, mask, axis=-1)
    mixed = dc.swapaxes(dc.matmul(weights, values), -2, -3)
    *lead, n_agents, heads, dk = mixed.shape
    merged = dc.reshape(mixed, tuple(lead) + (n_agents, heads * dk))
    return AttentionOutput(dc.matmul(merged, params["wo"]) + params["bo"], weights)


def mha_forward(queries, keys_values, mask, params: dict, heads: int) -> AttentionOutput:
    logits, values = attention_logits(queries, keys_values, params, heads)
    return attend(logits, values, mask, params)


def mha_forward_masks(queries, keys_values, masks, params: dict, heads: int) -> list[AttentionOutput]:
    """Several mask variants sharing one set of query/key/value projections."""
    logits, values = attention_logits(queries, keys_values, params, heads)
    return [attend(logits, values, m, params) for m in masks]


def extract_preferences(x, roles, agent_count: int, ff_params: dict, att_params: dict,
                        heads: int) -> PreferenceMatrix:
    """Head-max-pooled agent-to-agent attention under an all-ones mask."""
    if agent_count < 2:
        raise ContractError("preference extraction needs at least two agents")
    feats = x.features if isinstance(x, AugmentedEntityMatrix) else np.asarray(x)
    with dc.no_grad():
        hidden = entity_ff(feats, ff_params)
        queries = hidden[..., :agent_count, :]
        mask = np.ones(hidden.shape[:-2] + (agent_count, hidden.shape[-2]), dtype=bool)
        out = mha_forward(queries, hidden, mask, att_params, heads)
    weights = out.weights.data[..., :agent_count]
    scores = weights.max(axis=-3)
    leaders = int(np.sum(np.asarray(roles)[:agent_count] == LEADER))
    return PreferenceMatrix(scores, max(leaders, 1))
