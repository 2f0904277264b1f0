"""TD, auxiliary-TD and similarity/diversity objectives on padded episode batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .batch import EpisodeBatch
from .diffcore import ParameterStore, Tensor
from .errors import ContractError
from .nets import (ModelConfig, augment, combine_aux_weights, encoder_forward, group_onehot,
                   gru_cell, hypernet_forward, mix_forward, utility_attention, utility_head)


@dataclass
class Unroll:
    """Utilities and embeddings for every step of a batch, shape (B, T+1, ...)."""

    q: Tensor
    q_in: Tensor | None
    q_out: Tensor | None
    embeddings: Tensor


def unroll(store: ParameterStore, cfg: ModelConfig, batch: EpisodeBatch, with_aux: bool = True) -> Unroll:
    masks = batch.masks()
    x = augment(batch.feats, batch.roles[:, None, :])
    variants = [masks.observability]
    if with_aux:
        variants += [masks.in_mask, masks.out_mask]
    zs = utility_attention(store, cfg, x, variants, batch.n_agents)
    gru = store.scope("util.gru")
    B, T1 = batch.feats.shape[:2]
    h = dc.Tensor(np.zeros((B, batch.n_agents, cfg.hidden)))
    z_steps = dc.swapaxes(zs[0], 0, 1)
    states = []
    for t in range(T1):
        h = gru_cell(gru, z_steps[t], h)
        states.append(h)
    hidden = dc.stack(states, axis=1)
    onehot = group_onehot(batch.groups, batch.group_map[:, None, :], cfg.n_groups)
    emb = encoder_forward(store.scope("util.enc"), hidden, onehot)
    q = utility_head(store, hidden, emb)
    q_in = q_out = None
    if with_aux:
        prev = dc.concat([dc.Tensor(np.zeros((B, 1, batch.n_agents, cfg.hidden))), hidden[:, :-1]], axis=1)
        q_in = utility_head(store, gru_cell(gru, zs[1], prev), emb)
        q_out = utility_head(store, gru_cell(gru, zs[2], prev), emb)
    return Unroll(q, q_in, q_out, emb)


def _chosen(q: Tensor, actions: np.ndarray, alive: np.ndarray) -> Tensor:
    return dc.one_hot_gather(q, actions) * alive.astype(float)


def td_targets(batch: EpisodeBatch, online: Unroll, target_store: ParameterStore,
               cfg: ModelConfig, gamma: float) -> np.ndarray:
    """``r + gamma * Qtot_target(next, online-greedy joint action)``; ``r`` at terminal steps."""
    if not 0.0 <= gamma < 1.0:
        raise ContractError("gamma must lie in [0, 1)")
    with dc.no_grad():
        tgt = unroll(target_store, cfg, batch, with_aux=False)
        greedy = np.argmax(online.q.data[:, 1:], axis=-1)
        alive_next = batch.alive[:, 1:]
        q_next = _chosen(tgt.q[:, 1:], greedy, alive_next)
        masks = batch.masks()
        (weights,) = hypernet_forward(target_store, cfg, batch.feats[:, 1:], [masks.hyper_all[:, 1:]],
                                      tgt.embeddings[:, 1:], batch.groups[:, 1:], alive_next)
        q_tot_next = mix_forward(q_next, weights).data
    cont = (~batch.terminal).astype(float)
    return batch.rewards + gamma * cont * q_tot_next


def q_tot(store: ParameterStore, cfg: ModelConfig, batch: EpisodeBatch, out: Unroll) -> tuple[Tensor, Tensor]:
    """Chosen-action ``Q_tot`` and the auxiliary 2|A|-factor estimate, both (B, T)."""
    masks = batch.masks()
    alive = batch.alive[:, :-1]
    sl = slice(None, -1)
    w_all, w_in, w_out = hypernet_forward(
        store, cfg, batch.feats[:, sl],
        [masks.hyper_all[:, sl], masks.hyper_in[:, sl], masks.hyper_out[:, sl]],
        out.embeddings[:, sl], batch.groups[:, sl], alive)
    q_main = mix_forward(_chosen(out.q[:, sl], batch.actions, alive), w_all)
    q_aux_inputs = dc.concat([_chosen(out.q_in[:, sl], batch.actions, alive),
                              _chosen(out.q_out[:, sl], batch.actions, alive)], axis=-1)
    q_aux = mix_forward(q_aux_inputs, combine_aux_weights(w_in, w_out))
    return q_main, q_aux


def masked_mse(pred: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    valid = valid.astype(float)
    n = valid.sum()
    if n == 0:
        raise ContractError("empty batch")
    err = pred - target
    return dc.tsum(err * err * valid) * (1.0 / n)


def sd_loss(embeddings, groups: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Sum over ordered pairs ``i != j`` of ``I(i,j) * cos(e_i, e_j)``, averaged over samples.

    ``I`` is -1 for teammates and +1 otherwise; agents with group ``-1`` are
    ignored.  ``embeddings`` is (..., A, D) and need not be normalized.
    """
    e = dc.l2_normalize(dc.as_tensor(embeddings), axis=-1)
    groups = np.asarray(groups)
    n_agents = groups.shape[-1]
    if n_agents < 2:
        return dc.Tensor(0.0)
    cos = dc.matmul(e, dc.swapaxes(e, -1, -2))
    live = groups >= 0
    pair = live[..., :, None] & live[..., None, :] & ~np.eye(n_agents, dtype=bool)
    same = groups[..., :, None] == groups[..., None, :]
    sign = np.where(same, -1.0, 1.0) * pair
    per_sample = dc.tsum(dc.tsum(cos * sign, axis=-1), axis=-1)
    if valid is None:
        valid = np.ones(per_sample.shape, dtype=bool)
    valid = np.broadcast_to(valid, per_sample.shape).astype(float)
    if valid.sum() == 0:
        return dc.Tensor(0.0)
    return dc.tsum(per_sample * valid) * (1.0 / valid.sum())


@dataclass
class LossReport:
    l_q: Tensor
    l_aux: Tensor
    l_sd: Tensor
    l_td: Tensor
    total: Tensor
    lam: float

    def values(self) -> dict:
        return {"l_q": self.l_q.item(), "l_aux": self.l_aux.item(), "l_sd": self.l_sd.item(),
                "l_td": self.l_td.item(), "total_loss": self.total.item()}


def combine(l_q, l_aux, l_sd, lam: float) -> LossReport:
    """``total = (1 - lam) * l_q + lam * l_aux + l_sd``."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    l_q, l_aux, l_sd = dc.as_tensor(l_q), dc.as_tensor(l_aux), dc.as_tensor(l_sd)
    if lam == 0.0:
        l_td = l_q * 1.0
    elif lam == 1.0:
        l_td = l_aux * 1.0
    else:
        l_td = l_q * (1.0 - lam) + l_aux * lam
    return LossReport(l_q, l_aux, l_sd, l_td, l_td + l_sd, lam)


def total_loss(batch: EpisodeBatch, store: ParameterStore, target_store: ParameterStore,
               cfg: ModelConfig, gamma: float = 0.99, lam: float = 0.5) -> LossReport:
    """All three objectives from one shared forward pass of the online network."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    if batch.size == 0 or not batch.valid.any():
        raise ContractError("empty batch")
    out = unroll(store, cfg, batch)
    y = td_targets(batch, out, target_store, cfg, gamma)
    q_main, q_aux = q_tot(store, cfg, batch, out)
    l_q = masked_mse(q_main, y, batch.valid)
    l_aux = masked_mse(q_aux, y, batch.valid)
    l_sd = sd_loss(out.embeddings[:, :-1], batch.groups[:, :-1], batch.valid)
    return combine(l_q, l_aux, l_sd, lam)


def q_loss(batch, store, target_store, cfg, gamma=0.99) -> Tensor:
    return total_loss(batch, store, target_store, cfg, gamma, 0.0).l_q


def aux_loss(batch, store, target_store, cfg, gamma=0.99) -> Tensor:
    return total_loss(batch, store, target_store, cfg, gamma, 1.0).l_aux
