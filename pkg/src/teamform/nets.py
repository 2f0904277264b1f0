"""Agent utility network, group-aware hypernetwork and monotonic mixer.

Shapes use ``...`` for any leading batch/time axes, ``A`` agents, ``E``
entities, ``H`` hidden width, ``U`` actions, ``M`` mixing width and ``K`` the
number of group slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .attention import (augment_features, entity_ff, extract_preferences, glorot,
                        init_entity_ff, init_mha, mha_forward_masks)
from .diffcore import ParameterStore, Tensor
from .errors import DimensionError
from .matching import PreferenceMatrix


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 10
    hidden: int = 32
    heads: int = 4
    emb_dim: int = 16
    n_actions: int = 6
    mix_hidden: int = 32
    n_groups: int = 4

    @classmethod
    def from_params(cls, store: ParameterStore, heads: int = 4) -> "ModelConfig":
        hidden = store["util.gru.w_hh"].shape[0]
        return cls(
            feature_dim=store["hyper.eff.w"].shape[0],
            hidden=hidden,
            heads=heads,
            emb_dim=store["util.enc.w"].shape[1],
            n_actions=store["util.head.w"].shape[1],
            mix_hidden=store["hyper.w1.w"].shape[1],
            n_groups=store["util.enc.w"].shape[0] - hidden,
        )


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    h, m, u, k, emb = cfg.hidden, cfg.mix_hidden, cfg.n_actions, cfg.n_groups, cfg.emb_dim
    s = ParameterStore()
    init_entity_ff(s, "util.eff", cfg.feature_dim + 3, h, rng)
    init_mha(s, "util.att", h, rng)
    s.add("util.gru.w_ih", glorot(rng, h, 3 * h))
    s.add("util.gru.w_hh", glorot(rng, h, 3 * h))
    s.add("util.gru.b_ih", np.zeros(3 * h))
    s.add("util.gru.b_hh", np.zeros(3 * h))
    s.add("util.enc.w", glorot(rng, h + k, emb))
    s.add("util.enc.b", rng.uniform(-0.1, 0.1, emb))
    # generated head starts small so the shared base head dominates early
    s.add("util.dec.w", 0.1 * glorot(rng, emb, (h + 1) * u))
    s.add("util.dec.b", np.zeros((h + 1) * u))
    s.add("util.head.w", glorot(rng, h, u))
    s.add("util.head.b", np.zeros(u))

    init_entity_ff(s, "hyper.eff", cfg.feature_dim, h, rng)
    init_mha(s, "hyper.att", h, rng)
    init_entity_ff(s, "hyper.feat", h, h, rng)
    s.add("hyper.dec.w", 0.1 * glorot(rng, emb, h * m + m))
    s.add("hyper.dec.b", np.zeros(h * m + m))
    s.add("hyper.w1.w", glorot(rng, h, m))
    s.add("hyper.w1.b", np.zeros(m))
    s.add("hyper.b1.w", glorot(rng, h, m))
    s.add("hyper.b1.b", np.zeros(m))
    s.add("hyper.w2.w", glorot(rng, h, m))
    s.add("hyper.w2.b", np.zeros(m))
    s.add("hyper.b2a.w", glorot(rng, h, h))
    s.add("hyper.b2a.b", np.zeros(h))
    s.add("hyper.b2b.w", glorot(rng, h, 1))
    s.add("hyper.b2b.b", np.zeros(1))
    return s


def describe(store: ParameterStore) -> str:
    lines = [f"{name:<20} {str(t.shape):<14} {t.size}" for name, t in store.items()]
    lines.append(f"{len(store)} tensors, {store.num_values()} values")
    return "\n".join(lines)


# utility network

def gru_cell(params: dict, x, h) -> Tensor:
    """Gated recurrent update ``h' = (1 - z) * n + z * h``."""
    size = params["w_hh"].shape[0]
    gi = dc.matmul(x, params["w_ih"]) + params["b_ih"]
    gh = dc.matmul(h, params["w_hh"]) + params["b_hh"]
    r = dc.sigmoid(gi[..., :size] + gh[..., :size])
    z = dc.sigmoid(gi[..., size:2 * size] + gh[..., size:2 * size])
    n = dc.tanh(gi[..., 2 * size:] + r * gh[..., 2 * size:])
    return (1.0 - z) * n + z * h


def group_onehot(groups: np.ndarray, group_map: np.ndarray, n_groups: int) -> np.ndarray:
    """One-hot of each agent's randomly relabelled group; zero rows for ``-1``.

    ``group_map`` has shape ``(K,)`` or ``groups.shape[:-1] + (K,)``.
    """
    groups = np.asarray(groups)
    group_map = np.broadcast_to(np.asarray(group_map), groups.shape[:-1] + (np.shape(group_map)[-1],))
    slots = np.take_along_axis(group_map, np.maximum(groups, 0), axis=-1)
    out = np.eye(n_groups)[slots]
    out[groups < 0] = 0.0
    return out


def encoder_forward(params: dict, hidden, onehot) -> Tensor:
    """Unit-norm agent embeddings from group-augmented hidden states."""
    x = dc.concat([dc.as_tensor(hidden), dc.as_tensor(onehot)], axis=-1)
    return dc.l2_normalize(dc.tanh(dc.matmul(x, params["w"]) + params["b"]), axis=-1)


def utility_head(store: ParameterStore, hidden, embeddings) -> Tensor:
    """Per-action utilities from a final layer whose weights depend on the embedding."""
    h, u = store["util.head.w"].shape
    gen = dc.matmul(embeddings, store["util.dec.w"]) + store["util.dec.b"]
    gen = dc.reshape(gen, gen.shape[:-1] + (h + 1, u))
    w = gen[..., :h, :] + store["util.head.w"]
    b = gen[..., h, :] + store["util.head.b"]
    q = dc.matmul(dc.expand_dims(dc.as_tensor(hidden), -2), w)
    return dc.reshape(q, q.shape[:-2] + (u,)) + b


def utility_attention(store: ParameterStore, cfg: ModelConfig, feats_aug, masks, n_agents: int) -> list[Tensor]:
    """Masked attention outputs of the agent rows, one per mask; agents always see themselves."""
    masks = [_with_self(m, n_agents) for m in masks]
    hidden = entity_ff(feats_aug, store.scope("util.eff"))
    queries = hidden[..., :n_agents, :]
    outs = mha_forward_masks(queries, hidden, masks, store.scope("util.att"), cfg.heads)
    return [o.embeddings for o in outs]


@dataclass
class UtilityOutput:
    q: Tensor
    q_in: Tensor | None
    q_out: Tensor | None
    embeddings: Tensor
    hidden: Tensor
    preferences: PreferenceMatrix | None = None


def utility_forward(store: ParameterStore, cfg: ModelConfig, feats_aug, roles, masks,
                    hidden, groups, group_map, n_agents: int,
                    with_aux: bool = True, with_preferences: bool = False) -> UtilityOutput:
    """One timestep of the agent utility network.

    ``masks`` is ``(observability, in, out)`` (or just the observability mask
    when ``with_aux`` is false); agents always attend to themselves.
    """
    masks = [masks] if not with_aux and not isinstance(masks, (list, tuple)) else list(masks)
    masks = masks[:3 if with_aux else 1]
    zs = utility_attention(store, cfg, feats_aug, masks, n_agents)
    gru = store.scope("util.gru")
    new_hidden = gru_cell(gru, zs[0], hidden)
    emb = encoder_forward(store.scope("util.enc"), new_hidden,
                          group_onehot(groups, group_map, cfg.n_groups))
    q = utility_head(store, new_hidden, emb)
    q_in = q_out = None
    if with_aux:
        q_in = utility_head(store, gru_cell(gru, zs[1], hidden), emb)
        q_out = utility_head(store, gru_cell(gru, zs[2], hidden), emb)
    prefs = None
    if with_preferences:
        prefs = extract_preferences(feats_aug, roles, n_agents, store.scope("util.eff"),
                                    store.scope("util.att"), cfg.heads)
    return UtilityOutput(q, q_in, q_out, emb, new_hidden, prefs)


def _with_self(mask, n_agents: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool).copy()
    idx = np.arange(n_agents)
    mask[..., idx, idx] = True
    return mask


# hypernetwork and mixer

@dataclass
class MixingWeights:
    w1: Tensor  # (..., n_inputs, M), nonnegative
    b1: Tensor  # (..., M)
    w2: Tensor  # (..., M), nonnegative
    b2: Tensor  # (...)


def group_states(embeddings, groups: np.ndarray, n_groups: int) -> Tensor:
    """Each agent's team state: elementwise max of its team's embeddings.

    Agents tagged ``-1`` (dead or padding) belong to no team and get zeros.
    """
    embeddings = dc.as_tensor(embeddings)
    groups = np.asarray(groups)
    member = groups[..., :, None] == np.arange(n_groups)  # (..., A, K)
    penalty = np.where(np.swapaxes(member, -1, -2), 0.0, -1e9)[..., None]  # (..., K, A, 1)
    pooled = dc.tmax(dc.expand_dims(embeddings, -3) + penalty, axis=-2)  # (..., K, emb)
    pooled = pooled * member.any(axis=-2)[..., None]
    return dc.matmul(member.astype(float), pooled)


def hypernet_forward(store: ParameterStore, cfg: ModelConfig, feats, masks, embeddings,
                     groups: np.ndarray, alive: np.ndarray) -> list[MixingWeights]:
    """Mixing weights for each mask variant in ``masks``.

    The first-layer weight row of agent ``a`` comes from a layer whose
    parameters are decoded from ``a``'s team state.
    """
    n_agents = np.asarray(groups).shape[-1]
    h, m = cfg.hidden, cfg.mix_hidden
    masks = [_with_self(mk, n_agents) for mk in masks]
    hid = entity_ff(feats, store.scope("hyper.eff"))
    outs = mha_forward_masks(hid[..., :n_agents, :], hid, masks, store.scope("hyper.att"), cfg.heads)
    gstate = group_states(embeddings, groups, cfg.n_groups)
    gen = dc.matmul(gstate, store["hyper.dec.w"]) + store["hyper.dec.b"]
    gen_w = dc.reshape(gen[..., :h * m], gen.shape[:-1] + (h, m)) + store["hyper.w1.w"]
    gen_b = gen[..., h * m:] + store["hyper.w1.b"]
    live = np.asarray(alive, dtype=float)[..., None]
    count = np.maximum(live.sum(axis=-2), 1.0)
    result = []
    for out in outs:
        z = out.embeddings
        r = entity_ff(z, store.scope("hyper.feat"))
        w1 = dc.matmul(dc.expand_dims(r, -2), gen_w)
        w1 = dc.tabs(dc.reshape(w1, w1.shape[:-2] + (m,)) + gen_b)
        pooled = dc.tsum(z * live, axis=-2) / count
        b1 = dc.matmul(pooled, store["hyper.b1.w"]) + store["hyper.b1.b"]
        w2 = dc.tabs(dc.matmul(pooled, store["hyper.w2.w"]) + store["hyper.w2.b"])
        b2 = dc.elu(dc.matmul(pooled, store["hyper.b2a.w"]) + store["hyper.b2a.b"])
        b2 = dc.matmul(b2, store["hyper.b2b.w"]) + store["hyper.b2b.b"]
        result.append(MixingWeights(w1, b1, w2, b2[..., 0]))
    return result


def combine_aux_weights(w_in: MixingWeights, w_out: MixingWeights) -> MixingWeights:
    """Weights for the 2|A|-input mixer: in-branch rows then out-branch rows."""
    return MixingWeights(dc.concat([w_in.w1, w_out.w1], axis=-2),
                         (w_in.b1 + w_out.b1) * 0.5,
                         (w_in.w2 + w_out.w2) * 0.5,
                         (w_in.b2 + w_out.b2) * 0.5)


def mix_forward(utilities, weights: MixingWeights) -> Tensor:
    """Two-layer monotonic mixer ``w2 . elu(Q W1 + b1) + b2``."""
    utilities = dc.as_tensor(utilities)
    if utilities.shape[-1] != weights.w1.shape[-2]:
        raise DimensionError(
            f"{utilities.shape[-1]} utilities for a mixer expecting {weights.w1.shape[-2]}")
    pre = dc.matmul(dc.expand_dims(utilities, -2), weights.w1)
    pre = dc.reshape(pre, pre.shape[:-2] + (pre.shape[-1],)) + weights.b1
    return dc.tsum(dc.elu(pre) * weights.w2, axis=-1) + weights.b2


def augment(feats, roles) -> np.ndarray:
    return augment_features(feats, roles)
