"""Self-check suites: matching stability, invariances, monotone mixing, masks and gradients.

Each suite returns a :class:`CheckResult`; ``run_all`` drives them for the
``check`` command.  Sizes default to the full sweeps; tests may shrink them.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .attention import sample_complementary_masks
from .batch import make_batch
from .env import WorldConfig
from .losses import combine, td_targets, total_loss, unroll
from .matching import (CapacityPlan, PreferenceMatrix, enumerate_stable_matchings,
                       find_blocking_pairs, oom_match, random_instance, som_match)
from .nets import MixingWeights, ModelConfig, hypernet_forward, init_params, mix_forward
from .training import collect_episode


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<22} {self.detail} ({self.seconds:.1f}s)"


def _timed(name, fn, *args, **kwargs) -> CheckResult:
    start = time.perf_counter()
    passed, detail = fn(*args, **kwargs)
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


# fixtures

def oom_fixture() -> tuple[PreferenceMatrix, CapacityPlan]:
    """Two leaders (capacities 2, 1) and three followers with hand-set rankings.

    Leader 0 ranks 2 > 3 > 4, leader 1 ranks 2 > 4 > 3; follower 2 prefers
    leader 1, followers 3 and 4 prefer leader 0.
    """
    S = np.zeros((5, 5))
    S[0, [2, 3, 4]] = [3, 2, 1]
    S[1, [2, 4, 3]] = [3, 2, 1]
    S[2, [1, 0]] = [2, 1]
    S[3, [0, 1]] = [2, 1]
    S[4, [0, 1]] = [2, 1]
    return PreferenceMatrix(S, 2), CapacityPlan([2, 1])


def som_fixture() -> tuple[PreferenceMatrix, CapacityPlan]:
    """Mutual scores 0.9 (f1,l1), 0.8 (f1,l2), 0.95 (f2,l1), 0.1 (f2,l2).

    Greedy assignment pairs f1 with l1 and leaves (l1, f2) blocking.
    """
    S = np.zeros((4, 4))
    S[2, 0] = S[0, 2] = 0.45
    S[2, 1] = S[1, 2] = 0.4
    S[3, 0], S[0, 3] = 0.45, 0.5
    S[3, 1] = S[1, 3] = 0.05
    return PreferenceMatrix(S, 2), CapacityPlan([1, 1])


def sweep_instances(count: int, seed: int):
    """Random instances with 1-3 leaders and 2-7 followers."""
    rng = np.random.default_rng(seed)
    for _ in range(count):
        yield random_instance(rng, int(rng.integers(1, 4)), int(rng.integers(2, 8)))


# matching suites

def _stability(count=1000, seed=0):
    blocked = members = 0
    som_pairs = som_slots = 0
    for prefs, plan in sweep_instances(count, seed):
        g = oom_match(prefs, plan)
        g.validate(prefs, plan)
        blocked += bool(find_blocking_pairs(g, prefs, plan))
        members += g in enumerate_stable_matchings(prefs, plan)
        som_pairs += len(find_blocking_pairs(som_match(prefs, plan), prefs, plan))
        som_slots += prefs.leader_count * len(prefs.followers)
    ok = blocked == 0 and members == count
    return ok, (f"{count} instances: {blocked} OOM outputs with blocking pairs, "
                f"{members} in the stable set; SOM blocking-pair rate {som_pairs / som_slots:.4f}")


def _som_instability(count=1000, seed=0):
    prefs, plan = som_fixture()
    fixture_pairs = find_blocking_pairs(som_match(prefs, plan), prefs, plan)
    unstable = sum(bool(find_blocking_pairs(som_match(p, c), p, c))
                   for p, c in sweep_instances(count, seed))
    ok = (0, 3) in fixture_pairs and unstable > 0
    return ok, f"fixture blocking pairs {fixture_pairs}; {unstable}/{count} random instances unstable"


def _order_invariance(count=500, seed=1):
    bad = 0
    for prefs, plan in sweep_instances(count, seed):
        g = oom_match(prefs, plan)
        for f in (np.exp, lambda x: 2 * x + 7, np.tanh):
            bad += oom_match(PreferenceMatrix(f(prefs.scores), prefs.leader_count), plan) != g
    return bad == 0, f"{count} instances x 3 increasing transforms: {bad} mismatches"


def _affine_invariance(count=500, seed=2):
    rng = np.random.default_rng(seed + 1000)
    bad = 0
    for prefs, plan in sweep_instances(count, seed):
        g = som_match(prefs, plan)
        a, c = rng.uniform(0.1, 10.0), rng.uniform(-5.0, 5.0)
        bad += som_match(PreferenceMatrix(a * prefs.scores + c, prefs.leader_count), plan) != g
    return bad == 0, f"{count} instances: {bad} mismatches under a*S + c"


def _oom_fixture():
    prefs, plan = oom_fixture()
    g = oom_match(prefs, plan)
    ok = g.canonical() == ((0, (3, 4)), (1, (2,)))
    return ok, f"grouping {g.to_record()['teams']}"


# mixing suites

def random_mixing_weights(rng: np.random.Generator, n_inputs: int, width: int = 8) -> MixingWeights:
    t = lambda *shape: dc.Tensor(rng.normal(size=shape))
    return MixingWeights(dc.tabs(t(n_inputs, width)), t(width), dc.tabs(t(width)), t())


def _monotonicity(count=1000, seed=3):
    rng = np.random.default_rng(seed)
    worst = np.inf
    decreases = 0
    with dc.default_dtype(np.float64):
        for _ in range(count):
            n = int(rng.integers(1, 9))
            w = random_mixing_weights(rng, n)
            q = dc.Tensor(rng.normal(scale=3.0, size=n), requires_grad=True)
            out = mix_forward(q, w)
            out.backward()
            worst = min(worst, float(q.grad.min()))
            bumped = q.data.copy()
            bumped[rng.integers(n)] += rng.uniform(1e-3, 5.0)
            decreases += float(mix_forward(bumped, w).data) < float(out.data)
    return worst >= -1e-12 and decreases == 0, f"min dQtot/dQa {worst:.3e}; {decreases} decreases"


def _greedy_consistency(seed=4, per_shape=20):
    rng = np.random.default_rng(seed)
    misses = cases = 0
    with dc.default_dtype(np.float64):
        for n_agents, n_actions in itertools.product((1, 2, 3), (2, 3, 4)):
            joint = np.array(list(itertools.product(range(n_actions), repeat=n_agents)))
            for _ in range(per_shape):
                u = rng.normal(size=(n_agents, n_actions))
                w = random_mixing_weights(rng, n_agents)
                values = mix_forward(u[np.arange(n_agents), joint], w).data
                greedy = mix_forward(u[np.arange(n_agents), u.argmax(axis=1)], w).data
                misses += greedy < values.max() - 1e-12
                cases += 1
        td_gap = td_target_joint_gap(seed)
    ok = misses == 0 and td_gap <= 1e-10
    return ok, f"{cases} mixer instances, {misses} misses; TD target vs joint argmax gap {td_gap:.2e}"


def td_target_joint_gap(seed: int = 0) -> float:
    """Largest |y_greedy - y_joint| when target and online parameters coincide.

    ``y_joint`` maximizes the target mixer over every joint action exhaustively.
    """
    world, cfg, store, _, batch = small_problem(seed)
    target = store.copy()
    with dc.no_grad():
        online = unroll(store, cfg, batch, with_aux=False)
        y = td_targets(batch, online, target, cfg, 0.9)
        tgt = unroll(target, cfg, batch, with_aux=False)
        q_next = tgt.q.data[:, 1:]  # (B, T, A, U)
        alive = batch.alive[:, 1:]
        (w,) = hypernet_forward(target, cfg, batch.feats[:, 1:], [batch.masks().hyper_all[:, 1:]],
                                tgt.embeddings[:, 1:], batch.groups[:, 1:], alive)
        A, U = q_next.shape[-2:]
        best = np.full(q_next.shape[:2], -np.inf)
        for joint in itertools.product(range(U), repeat=A):
            chosen = q_next[..., np.arange(A), list(joint)] * alive
            best = np.maximum(best, mix_forward(chosen, w).data)
    y_joint = batch.rewards + 0.9 * (~batch.terminal) * best
    return float(np.max(np.abs(y - y_joint) * batch.valid))


# mask suite

def _mask_sweep(count=1000, seed=5):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(count):
        n_agents = int(rng.integers(1, 9))
        n_ent = n_agents + int(rng.integers(0, 6))
        obs = rng.random((n_agents, n_ent)) < rng.uniform(0.2, 1.0)
        obs[np.arange(n_agents), np.arange(n_agents)] = True
        ms = sample_complementary_masks(obs, rng)
        inn, out = ms.in_mask.astype(bool), ms.out_mask.astype(bool)
        ok = (not np.any(inn & out) and np.array_equal(inn | out, obs)
              and not np.any((inn | out) & ~obs)
              and np.all(inn[np.arange(n_agents), np.arange(n_agents)]))
        bad += not ok
    return bad == 0, f"{count} draws: {bad} violations"


# gradient suites

SMALL_MODEL = ModelConfig(hidden=8, heads=2, emb_dim=4, mix_hidden=6)


def small_problem(seed: int, agents=(3, 4), steps: int = 4, episodes: int = 2,
                  cfg: ModelConfig = SMALL_MODEL):
    """A tiny world, network, target copy and replay batch for gradient-level checks."""
    rng = np.random.default_rng(seed)
    world = WorldConfig(grid_size=4, min_agents=max(agents[0], 3), max_agents=agents[1], leaders=2,
                        targets=1, hazards=1, max_steps=steps, obs_radius=1, seed=seed)
    with dc.default_dtype(np.float64):
        store = init_params(cfg, rng)
        target = init_params(cfg, rng)
        eps = [collect_episode(world, store, cfg, 0.5, "oom", rng, episode_id=i)
               for i in range(episodes)]
        batch = make_batch(eps, rng)
        batch.rewards = batch.rewards + rng.normal(scale=0.5, size=batch.rewards.shape)
    return world, cfg, store, target, batch


def loss_gradient_errors(seed: int, max_coords: int = 3) -> dict:
    """Worst finite-difference relative error of each loss term over all parameters."""
    _, cfg, store, target, batch = small_problem(seed)
    params = list(store.values())
    rng = np.random.default_rng(seed)
    terms = {
        "l_q": lambda *_: total_loss(batch, store, target, cfg, 0.99, 0.0).l_q,
        "l_aux": lambda *_: total_loss(batch, store, target, cfg, 0.99, 1.0).l_aux,
        "l_sd": lambda *_: total_loss(batch, store, target, cfg, 0.99, 0.5).l_sd,
    }
    with dc.default_dtype(np.float64):
        return {name: dc.grad_check(fn, params, max_coords=max_coords, rng=rng).worst
                for name, fn in terms.items()}


def _loss_gradients(instances=20, seed=6):
    worst = {"l_q": 0.0, "l_aux": 0.0, "l_sd": 0.0}
    for i in range(instances):
        for name, err in loss_gradient_errors(seed + i).items():
            worst[name] = max(worst[name], err)
    ok = all(v < 1e-4 for v in worst.values())
    return ok, f"{instances} instances, worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def _loss_arithmetic(count=200, seed=7):
    rng = np.random.default_rng(seed)
    worst = 0.0
    with dc.default_dtype(np.float64):
        for _ in range(count):
            l_q, l_aux, l_sd = rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(-10, 10)
            lam = float(rng.choice([0.0, 1.0, rng.uniform()]))
            r = combine(l_q, l_aux, l_sd, lam)
            worst = max(worst, abs(r.total.item() - ((1 - lam) * l_q + lam * l_aux + l_sd)))
            if lam == 0.0:
                worst = max(worst, abs(r.total.item() - (l_q + l_sd)))
            if lam == 1.0:
                worst = max(worst, abs(r.total.item() - (l_aux + l_sd)))
    return worst <= 1e-12, f"{count} reports, worst identity error {worst:.1e}"


SUITES = {
    "stability": _stability,
    "som_instability": _som_instability,
    "oom_fixture": _oom_fixture,
    "order_invariance": _order_invariance,
    "affine_invariance": _affine_invariance,
    "monotonicity": _monotonicity,
    "greedy_consistency": _greedy_consistency,
    "mask_sweep": _mask_sweep,
    "loss_gradients": _loss_gradients,
    "loss_arithmetic": _loss_arithmetic,
}


def run(name: str, **kwargs) -> CheckResult:
    return _timed(name, SUITES[name], **kwargs)


def run_all(names=None) -> list[CheckResult]:
    return [run(n) for n in (names or SUITES)]
