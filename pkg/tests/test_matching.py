import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teamform.errors import ContractError, SizeLimitError
from teamform.matching import (CapacityPlan, Grouping, PreferenceMatrix, balance_capacities,
                               enumerate_stable_matchings, find_blocking_pairs, match, oom_match,
                               random_instance, som_match)

L1, L2, F1, F2, F3 = 0, 1, 2, 3, 4


def scores_from_rankings(n, rankings):
    """Score rows that reproduce the given best-first rankings."""
    S = np.zeros((n, n))
    for agent, order in rankings.items():
        for rank, other in enumerate(order):
            S[agent, other] = len(order) - rank
    return S


@pytest.fixture
def oom_fixture():
    S = scores_from_rankings(5, {
        L1: [F1, F2, F3], L2: [F1, F3, F2],
        F1: [L2, L1], F2: [L1, L2], F3: [L1, L2],
    })
    return PreferenceMatrix(S, 2), CapacityPlan([2, 1])


@pytest.fixture
def som_fixture():
    S = np.zeros((4, 4))
    l1, l2, f1, f2 = 0, 1, 2, 3
    S[f1, l1] = S[l1, f1] = 0.45
    S[f1, l2] = S[l2, f1] = 0.4
    S[f2, l1], S[l1, f2] = 0.45, 0.5
    S[f2, l2] = S[l2, f2] = 0.05
    return PreferenceMatrix(S, 2), CapacityPlan([1, 1])


instances = st.tuples(st.integers(1, 3), st.integers(2, 7), st.integers(0, 2**31 - 1))


def build(case):
    leaders, followers, seed = case
    return random_instance(np.random.default_rng(seed), leaders, followers)


@pytest.mark.parametrize("leaders,followers,expected", [
    (2, 3, [2, 1]), (3, 3, [1, 1, 1]), (4, 4, [1, 1, 1, 1]), (3, 7, [3, 2, 2]), (2, 0, [0, 0]),
])
def test_balance_capacities(leaders, followers, expected):
    assert balance_capacities(leaders, followers).capacities == expected


def test_balance_capacities_needs_a_leader():
    with pytest.raises(ContractError):
        balance_capacities(0, 3)


def test_oom_hand_run(oom_fixture):
    prefs, plan = oom_fixture
    stats = {}
    g = oom_match(prefs, plan, stats)
    assert g == Grouping({L1: [F2, F3], L2: [F1]})
    assert find_blocking_pairs(g, prefs, plan) == []
    assert g in enumerate_stable_matchings(prefs, plan)
    assert stats["proposals"] <= 2 * 3


def test_single_leader_takes_everyone(rng):
    prefs, plan = random_instance(rng, 1, 5)
    for algo in ("oom", "som"):
        g = match(prefs, algo, plan)
        assert sorted(g.teams[0]) == [1, 2, 3, 4, 5]
        assert find_blocking_pairs(g, prefs, plan) == []
    assert len(enumerate_stable_matchings(prefs, plan)) == 1


def test_som_fixture_is_unstable(som_fixture):
    prefs, plan = som_fixture
    g = som_match(prefs, plan)
    assert g == Grouping({0: [2], 1: [3]})
    assert (0, 3) in find_blocking_pairs(g, prefs, plan)
    S = prefs.scores
    assert S[2, 0] + S[0, 2] + S[3, 1] + S[1, 3] == pytest.approx(1.0)
    assert S[3, 0] + S[0, 3] + S[2, 1] + S[1, 2] == pytest.approx(1.75)


def test_ties_prefer_lower_index():
    prefs = PreferenceMatrix(np.zeros((4, 4)), 2)
    assert prefs.leader_ranking(0) == [2, 3]
    assert prefs.follower_rank(3) == {0: 0, 1: 1}
    assert som_match(prefs, CapacityPlan([1, 1])) == Grouping({0: [2], 1: [3]})


@settings(max_examples=300, deadline=None)
@given(instances)
def test_oom_is_stable_and_in_stable_set(case):
    prefs, plan = build(case)
    stats = {}
    g = oom_match(prefs, plan, stats)
    g.validate(prefs, plan)
    assert find_blocking_pairs(g, prefs, plan) == []
    assert g in enumerate_stable_matchings(prefs, plan)
    assert stats["proposals"] <= prefs.leader_count * len(prefs.followers)


@settings(max_examples=200, deadline=None)
@given(instances)
def test_oom_order_invariance(case):
    prefs, plan = build(case)
    g = oom_match(prefs, plan)
    for transform in (np.exp, lambda x: 2 * x + 7):
        assert oom_match(PreferenceMatrix(transform(prefs.scores), prefs.leader_count), plan) == g


@settings(max_examples=200, deadline=None)
@given(instances, st.floats(0.01, 100), st.floats(-50, 50))
def test_som_affine_invariance(case, scale, shift):
    prefs, plan = build(case)
    g = som_match(prefs, plan)
    g.validate(prefs, plan)
    moved = PreferenceMatrix(scale * prefs.scores + shift, prefs.leader_count)
    assert som_match(moved, plan) == g


@settings(max_examples=100, deadline=None)
@given(instances)
def test_matchers_are_deterministic(case):
    prefs, plan = build(case)
    for algo in ("oom", "som"):
        assert match(prefs, algo, plan).canonical() == match(prefs, algo, plan).canonical()


def test_oom_and_som_can_disagree():
    rng = np.random.default_rng(3)
    differ = 0
    for _ in range(200):
        prefs, plan = random_instance(rng, 2, 4)
        differ += oom_match(prefs, plan) != som_match(prefs, plan)
    assert differ > 0


def test_enumeration_size_guard(rng):
    prefs, plan = random_instance(rng, 4, 4)
    with pytest.raises(SizeLimitError):
        enumerate_stable_matchings(prefs, plan)
    prefs, plan = random_instance(rng, 2, 8)
    with pytest.raises(SizeLimitError):
        enumerate_stable_matchings(prefs, plan)


def test_capacity_plan_must_place_everyone(rng):
    prefs, _ = random_instance(rng, 2, 3)
    with pytest.raises(ContractError):
        oom_match(prefs, CapacityPlan([1, 1]))


@pytest.mark.parametrize("scores", [np.ones((2, 3)), np.array([[0.0, np.nan], [1.0, 0.0]])])
def test_preference_matrix_rejects_bad_scores(scores):
    with pytest.raises(ContractError):
        PreferenceMatrix(scores, 1)


def test_unknown_algorithm(rng):
    prefs, plan = random_instance(rng, 2, 2)
    with pytest.raises(ContractError):
        match(prefs, "greedy", plan)


def test_record_round_trip(rng):
    prefs, _ = random_instance(rng, 2, 3)
    back = PreferenceMatrix.from_record(prefs.to_record())
    assert back.leader_count == 2
    np.testing.assert_array_equal(back.scores, prefs.scores)
    g = oom_match(prefs, balance_capacities(2, 3))
    record = g.to_record()
    assert [t["leader"] for t in record["teams"]] == [0, 1]
