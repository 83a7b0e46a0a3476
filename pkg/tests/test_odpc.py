import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcmlp.core import TabularMdp, TabularPolicy, exact_value_tabular, stream
from pcmlp.envs import make_tabular_linmdp
from pcmlp.mle import TransitionDataset
from pcmlp.odpc import (EluderInstance, confidence_region, eluder_dimension, eluder_instance, eluder_w_k,
                        feasibility_radius, region_statistics, run_odpc)
from pcmlp.planners import plan_mdp


def forward_occupancy(pi_table, P, H, s0):
    """Independent oracle: time-averaged occupancy by explicit forward recursion."""
    S = P.shape[0]
    mu = np.eye(S)[s0]
    total = np.zeros(P.shape[:2])
    for h in range(H):
        joint = mu[:, None] * pi_table[h]
        total += joint
        mu = np.einsum("sa,sat->t", joint, P)
    return total / H


def brute_w(tables, pol_tables, mdp, eps, prefix, p):
    """Independent oracle for ``w_k``: loop over ordered pairs of distinct models."""
    best = 0.0
    for i, j in itertools.permutations(range(len(tables)), 2):
        def gap(q):
            d = forward_occupancy(pol_tables[q], mdp.P, mdp.horizon, mdp.initial_state)
            return float(np.sum(d * np.abs(tables[i] - tables[j]).sum(-1)))
        if math.sqrt(sum(gap(q) ** 2 for q in prefix)) <= eps + 1e-12:
            best = max(best, gap(p))
    return best


def brute_dimension(inst, max_length):
    """Independent oracle: longest admissible sequence by enumerating every sequence."""
    n = len(inst.policies)
    tables = inst.tables
    pol_tables = [pi.table for pi in inst.policies]
    best = 0
    for L in range(1, max_length + 1):
        found = False
        for seq in itertools.product(range(n), repeat=L):
            if all(brute_w(tables, pol_tables, inst.mdp, inst.eps, seq[:k], seq[k]) >= inst.eps - 1e-12
                   for k in range(L)):
                found = True
                break
        if not found:
            break
        best = L
    return best


def random_instance(seed, n_models=3, n_policies=3, S=3, A=2, H=2, eps=0.3, spread=0.4):
    """Models are random blends toward a shared base, so their gaps are comparable to ``eps``."""
    rng = stream(seed, "eluder-inst")
    P = rng.dirichlet(np.ones(S), size=(S, A))
    mdp = TabularMdp(P, np.zeros((S, A)), H, 0)
    tables = [(1 - w) * P + w * rng.dirichlet(np.ones(S), size=(S, A)) for w in rng.uniform(0, spread, n_models)]
    pols = [TabularPolicy.from_actions(rng.integers(0, A, size=(H, S)), A) for _ in range(n_policies)]
    return EluderInstance(tuple(tables), tuple(pols), mdp, eps)


# ---------------------------------------------------------------------------
# confidence regions
# ---------------------------------------------------------------------------

def test_feasibility_radius_formula():
    L = math.log(2 * 4 * 5 / 0.1)
    assert feasibility_radius(4, 5, 500, 0.1) == pytest.approx(6 * math.sqrt(L / 500) + 2 * L / 500)
    with pytest.raises(ValueError):
        feasibility_radius(4, 5, 500, 1.0)


def test_region_statistic_matches_direct_average():
    rng = stream(0, "stat")
    tables = [rng.dirichlet(np.ones(3), size=(3, 2)) for _ in range(3)]
    s, a = rng.integers(0, 3, 40), rng.integers(0, 2, 40)
    data = TransitionDataset(s, a, np.zeros(40, int))
    stats = region_statistics(tables, 1, data)
    direct = [np.mean([np.abs(tables[1][x, y] - P[x, y]).sum() ** 2 for x, y in zip(s, a)]) for P in tables]
    assert np.allclose(stats, direct)
    assert stats[1] == 0.0


def test_copy_of_center_is_always_a_member():
    rng = stream(1, "copy")
    P = rng.dirichlet(np.ones(3), size=(3, 2))
    data = TransitionDataset([0, 1, 2], [1, 0, 1], [0, 0, 0])
    region = confidence_region([rng.dirichlet(np.ones(3), size=(3, 2)), P, P.copy()], 1, data, 0.0)
    assert 2 in region.members and 1 in region.members


def test_empty_region_falls_back_to_center(caplog):
    P = np.full((2, 1, 2), 0.5)
    data = TransitionDataset([0], [0], [1])
    region = confidence_region([P], 0, data, -1.0)
    assert region.fallback and region.members == (0,)
    assert "empty" in caplog.text


# ---------------------------------------------------------------------------
# optimistic loop
# ---------------------------------------------------------------------------

def test_singleton_class_returns_the_exact_optimum_every_iteration():
    inst = make_tabular_linmdp(n_candidates=1, seed=2)
    res = run_odpc(inst, M=100, N=4, seed=2)
    v_star = plan_mdp(inst.env.mdp).value
    assert res.v_star == pytest.approx(v_star)
    assert res.always_feasible
    for pi in res.cover.policies[1:]:
        assert exact_value_tabular(pi, inst.env.mdp) == pytest.approx(v_star, abs=1e-12)


def test_cover_and_records_have_loop_lengths():
    inst = make_tabular_linmdp(seed=3)
    res = run_odpc(inst, M=200, N=3, seed=3)
    assert len(res.cover) == 4 and len(res.records) == 3 and len(res.regions) == 3
    assert all(r.plan_value_model >= res.v_star - 1e-9 for r, g in zip(res.records, res.regions)
               if inst.truth_index in g.members)


def test_loop_is_deterministic():
    inst = make_tabular_linmdp(seed=4)
    a, b = run_odpc(inst, M=200, N=3, seed=7), run_odpc(inst, M=200, N=3, seed=7)
    assert a.records == b.records


def test_restricted_policy_class():
    inst = make_tabular_linmdp(seed=5)
    mdp = inst.env.mdp
    pols = [TabularPolicy.from_actions(np.full((mdp.horizon, mdp.n_states), a), mdp.n_actions)
            for a in range(mdp.n_actions)]
    res = run_odpc(inst, M=200, N=2, policies=pols, seed=5)
    assert all(any(np.array_equal(pi.table, q.table) for q in pols) for pi in res.cover.policies[1:])


def test_feasibility_holds_on_most_seeds():
    feasible = sum(run_odpc(make_tabular_linmdp(seed=s), M=500, N=5, delta=0.1, seed=s).always_feasible
                   for s in range(40))
    assert feasible >= 0.85 * 40


# ---------------------------------------------------------------------------
# eluder quantities
# ---------------------------------------------------------------------------

def test_singleton_w_is_zero():
    inst = eluder_instance("singleton")
    assert eluder_w_k(inst, (), 0) == 0.0
    assert eluder_w_k(inst, (0, 1), 1) == 0.0


def test_empty_prefix_w_is_twice_the_tv_gap():
    inst = eluder_instance("constant_gap")
    tv = 0.5 * np.abs(inst.tables[0] - inst.tables[1]).sum(-1)
    assert np.allclose(tv, 0.15)
    assert eluder_w_k(inst, (), 0) == pytest.approx(2 * 0.15)


@pytest.mark.parametrize("seed", range(4))
def test_w_matches_brute_force(seed):
    inst = random_instance(seed, eps=0.1)
    pol_tables = [pi.table for pi in inst.policies]
    for prefix in [(), (0,), (1,), (0, 1), (1, 1), (2, 0, 2)]:
        for p in range(3):
            assert eluder_w_k(inst, prefix, p) == pytest.approx(
                brute_w(inst.tables, pol_tables, inst.mdp, inst.eps, prefix, p), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(0, 2), min_size=1, max_size=6), st.integers(0, 2))
def test_w_is_non_increasing_as_the_prefix_grows(seed, seq, p):
    inst = random_instance(seed, eps=0.1)
    ws = [eluder_w_k(inst, seq[:k], p) for k in range(len(seq) + 1)]
    assert all(b <= a + 1e-12 for a, b in zip(ws, ws[1:]))


def test_known_dimensions():
    assert eluder_dimension(eluder_instance("singleton")).dimension == 0
    assert eluder_dimension(eluder_instance("separated_pair")).dimension == 1
    assert eluder_dimension(eluder_instance("separated_pair", eps=0.5)).dimension == 0


def test_dimension_is_not_monotone_in_eps():
    # w_k >= eps and the admission radius both scale with eps, so raising eps
    # can lengthen the longest sequence
    inst = eluder_instance("constant_gap")
    assert eluder_dimension(inst.with_eps(0.25)).dimension == 1
    assert eluder_dimension(inst.with_eps(0.3)).dimension == 2
    assert eluder_dimension(inst.with_eps(0.31)).dimension == 0


@pytest.mark.parametrize("seed,eps,expected", [(0, 0.2, 2), (1, 0.1, 2), (2, 0.1, 2), (5, 0.05, 1),
                                               (6, 0.05, 2), (7, 0.15, 2)])
def test_dimension_matches_exhaustive_enumeration(seed, eps, expected):
    inst = random_instance(seed, eps=eps)
    res = eluder_dimension(inst, max_length=5)
    assert res.dimension == brute_dimension(inst, 5) == expected
    seq = res.sequence
    assert all(eluder_w_k(inst, seq[:k], seq[k]) >= inst.eps - 1e-12 for k in range(len(seq)))


def test_no_repeat_and_caps():
    inst = eluder_instance("constant_gap")
    res = eluder_dimension(inst, no_repeat=True)
    assert res.dimension == 2 and len(set(res.sequence)) == 2
    capped = eluder_dimension(inst, max_length=1)
    assert capped.capped and capped.dimension == 1
    tiny = eluder_dimension(inst, budget=1)
    assert tiny.budget_exceeded and tiny.dimension <= 2


def test_instance_validation():
    with pytest.raises(ValueError):
        eluder_instance("constant_gap", eps=0.0)
    with pytest.raises(KeyError):
        eluder_instance("missing")
