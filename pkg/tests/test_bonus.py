import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcmlp.bonus import (BonusSpec, NumericalError, PolicyCover, aggregate, bonus,
                         bonus_sandwich_check, covariance, estimate_policy_cov, information_gain,
                         information_gain_bound, mixture_sample, mixture_transitions, sample_transitions,
                         sandwich_sample_size, trace_telescope_check)
from pcmlp.core import TabularMdp, TabularPolicy, occupancy, stream
from pcmlp.features import CustomFeatures, OneHotFeatures
from pcmlp.lemmas import random_psd_sequence


def exact_cov(pi, mdp, fmap):
    """Exact enumeration oracle: ``sum_{s,a} d(s, a) phi phi^T``."""
    d = occupancy(pi, mdp)
    Phi = fmap.matrix()
    return np.einsum("sa,sai,saj->ij", d, Phi, Phi)


def random_mdp(rng, S=3, A=2, H=4):
    return TabularMdp(rng.dirichlet(np.ones(S), size=(S, A)), rng.uniform(size=(S, A)), H, 0)


# ---------------------------------------------------------------------------
# covariance estimation
# ---------------------------------------------------------------------------

def test_deterministic_pair_gives_rank_one_covariance():
    P = np.zeros((2, 2, 2))
    P[:, :, 0] = 1.0
    mdp = TabularMdp(P, np.zeros((2, 2)), 1, 0)
    pi = TabularPolicy.from_actions(np.array([[1, 0]]), 2)
    fmap = OneHotFeatures(2, 2)
    cov = estimate_policy_cov(pi, mdp, fmap, 50, stream(0))
    assert np.array_equal(cov, np.outer(fmap(0, 1), fmap(0, 1)))


def test_empirical_covariance_converges_to_exact():
    rng = stream(0, "cov-inst")
    mdp = random_mdp(rng)
    pi = TabularPolicy(rng.dirichlet(np.ones(2), size=(4, 3)))
    fmap = OneHotFeatures(3, 2)
    cov = estimate_policy_cov(pi, mdp, fmap, 100_000, stream(0, "cov"))
    assert np.linalg.norm(cov - exact_cov(pi, mdp, fmap)) <= 0.02


def test_zero_features_give_zero_covariance():
    mdp = random_mdp(stream(1))
    zero = CustomFeatures(lambda S, A: np.zeros((len(np.ravel(S)), 3)), 3)
    cov = estimate_policy_cov(TabularPolicy.uniform(4, 3, 2), mdp, zero, 100, stream(1))
    assert np.array_equal(cov, np.zeros((3, 3)))


def test_covariance_is_symmetric_psd_with_bounded_trace():
    phi = stream(2, "phi").normal(size=(200, 5))
    phi /= np.maximum(np.linalg.norm(phi, axis=1, keepdims=True), 1.0)
    cov = covariance(phi)
    assert np.array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10
    assert np.trace(cov) <= 1 + 1e-12


def test_trajectory_mode_keeps_whole_episodes():
    mdp = random_mdp(stream(3))
    b = sample_transitions(TabularPolicy.uniform(4, 3, 2), mdp, 10, stream(3), mode="trajectory")
    assert len(b) == 12
    assert np.array_equal(b.steps, np.tile(np.arange(4), 3))


def test_unknown_sampling_mode():
    with pytest.raises(ValueError):
        sample_transitions(TabularPolicy.uniform(4, 3, 2), random_mdp(stream(3)), 5, stream(3), mode="x")


# ---------------------------------------------------------------------------
# aggregate and cover
# ---------------------------------------------------------------------------

def test_empty_cover_aggregate_is_lambda_identity():
    assert np.array_equal(aggregate([], 0.01, d=3), 0.01 * np.eye(3))
    assert np.array_equal(aggregate(PolicyCover(), 0.5, d=2), 0.5 * np.eye(2))


def test_aggregate_sums_rather_than_averages():
    e1 = np.diag([1.0, 0.0, 0.0])
    assert np.array_equal(aggregate([e1, e1], 1.0), np.diag([3.0, 1.0, 1.0]))


def test_aggregate_min_eigenvalue_is_at_least_lambda():
    covs = random_psd_sequence(stream(4), 5, 6, 1.0)
    assert np.linalg.eigvalsh(aggregate(covs, 0.3)).min() >= 0.3 * (1 - 1e-9)


def test_aggregate_rejects_non_positive_lambda():
    with pytest.raises(ValueError):
        aggregate([], 0.0, d=2)


def test_cover_records_covariances_in_order():
    cover = PolicyCover()
    cover.add("pi1")
    with pytest.raises(ValueError):
        cover.set_cov(1, np.eye(2))
    cover.set_cov(0, np.eye(2))
    with pytest.raises(IndexError):
        cover.set_cov(1, np.eye(2))
    cover.add("pi2")
    with pytest.raises(ValueError):
        cover.set_cov(1, np.array([[0.0, 1.0], [0.0, 0.0]]))


# ---------------------------------------------------------------------------
# bonus values
# ---------------------------------------------------------------------------

def test_identity_bonus():
    spec = BonusSpec(1.0, 10.0, 1.0, np.eye(3))
    assert bonus(spec, np.array([1.0, 0.0, 0.0])) == pytest.approx(2.0)


def test_bonus_is_capped_at_horizon():
    spec = BonusSpec(100.0, 10.0, 1.0, np.eye(3))
    assert bonus(spec, np.array([1.0, 0.0, 0.0])) == 10.0


def test_diagonal_bonus():
    spec = BonusSpec(1.0, 10.0, 1.0, np.diag([2.0, 1.0]))
    assert bonus(spec, np.array([1.0, 0.0])) == pytest.approx(math.sqrt(2))


def test_proof_form_scales_by_root_half_and_caps_at_twice_h():
    main = BonusSpec(1.0, 1.0, 1.0, np.eye(2))
    proof = BonusSpec(1.0, 1.0, 1.0, np.eye(2), form="proof")
    small = np.array([0.2, 0.0])
    assert proof(small) == pytest.approx(main(small) / math.sqrt(2))
    capped = BonusSpec(100.0, 1.0, 1.0, np.eye(2), form="proof")
    assert capped(np.array([1.0, 0.0])) == 2.0


def test_non_positive_definite_aggregate_raises():
    with pytest.raises(NumericalError):
        BonusSpec(1.0, 1.0, 1.0, np.diag([1.0, -1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 10.0), st.floats(0.0, 50.0))
def test_bonus_matches_explicit_solve_and_stays_in_range(seed, lam, c):
    rng = stream(seed, "bonus")
    covs = random_psd_sequence(rng, 4, 3, 1.0)
    S = aggregate(covs, lam)
    phi = rng.normal(size=(10, 4))
    phi /= np.maximum(np.linalg.norm(phi, axis=1, keepdims=True), 1.0)
    spec = BonusSpec(c, 5.0, lam, S)
    oracle = np.minimum(2 * c * np.sqrt(np.einsum("ij,ij->i", phi, np.linalg.solve(S, phi.T).T)), 5.0)
    b = spec(phi)
    assert np.allclose(b, oracle, rtol=1e-9, atol=1e-12)
    assert np.all((b >= 0) & (b <= 5.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_bonus_shrinks_as_cover_grows(seed):
    rng = stream(seed, "shrink")
    covs = random_psd_sequence(rng, 4, 6, 1.0)
    phi = rng.normal(size=(20, 4))
    phi /= np.linalg.norm(phi, axis=1, keepdims=True)
    prev = None
    for n in range(7):
        b = BonusSpec(1.0, 10.0, 0.1, aggregate(covs[:n], 0.1, d=4))(phi)
        if prev is not None:
            assert np.all(b <= prev + 1e-12)
        prev = b


# ---------------------------------------------------------------------------
# sandwich, information gain, telescoping
# ---------------------------------------------------------------------------

def test_sandwich_ratio_is_two_with_exact_covariances():
    covs = random_psd_sequence(stream(5), 3, 4, 1.0)
    probes = np.eye(3)
    rep = bonus_sandwich_check(covs, covs, probes, 1.0, c=0.1, H=100.0)
    assert rep.min_quad_ratio == pytest.approx(1.0) and rep.max_quad_ratio == pytest.approx(1.0)
    assert rep.min_bonus_ratio == pytest.approx(2.0) and rep.max_bonus_ratio == pytest.approx(2.0)


def test_sandwich_ratio_is_one_when_both_capped():
    covs = random_psd_sequence(stream(6), 3, 2, 1.0)
    rep = bonus_sandwich_check(covs, covs, np.eye(3), 1.0, c=1e6, H=1.0)
    assert rep.min_bonus_ratio == pytest.approx(1.0) and rep.max_bonus_ratio == pytest.approx(1.0)


def test_sandwich_sample_size_formula():
    assert sandwich_sample_size(5, 4, 1.0, 0.05) == math.ceil(800 * math.log(3200))


def test_information_gain_values():
    assert information_gain([], 1.0) == 0.0
    assert information_gain([np.eye(3)], 1.0) == pytest.approx(3 * math.log(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 20), st.integers(1, 8), st.floats(0.01, 10.0))
def test_information_gain_respects_bound(seed, N, d, lam):
    covs = random_psd_sequence(stream(seed, "ig"), d, N, 1.0)
    # trace <= 1 keeps every covariance inside the bound's assumptions
    covs = [c / max(1.0, np.trace(c)) for c in covs]
    assert information_gain(covs, lam) <= information_gain_bound(d, N, lam) + 1e-9


def test_telescope_trivial_cases():
    assert trace_telescope_check([np.zeros((2, 2))] * 3, 1.0) == (0.0, 0.0)
    lhs, rhs = trace_telescope_check([np.eye(1)], 1.0)
    assert lhs == pytest.approx(2 * math.log(2)) and rhs == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 20), st.integers(1, 8),
       st.floats(math.log(0.01), math.log(10.0)))
def test_telescope_inequality_holds(seed, N, d, log_lam):
    lam = math.exp(log_lam)
    lhs, rhs = trace_telescope_check(random_psd_sequence(stream(seed, "tt"), d, N, min(1.0, lam)), lam)
    assert lhs >= rhs - 1e-9


def test_telescope_rejects_eigenvalues_above_cap():
    with pytest.raises(ValueError):
        trace_telescope_check([np.eye(1)], 0.01)
    with pytest.raises(ValueError):
        trace_telescope_check([2 * np.eye(1)], 5.0)


# ---------------------------------------------------------------------------
# mixture sampling
# ---------------------------------------------------------------------------

def disjoint_mdp():
    """Action picks the absorbing state (0 or 1) reached from the start state 2."""
    P = np.zeros((3, 2, 3))
    P[:, 0, 0] = P[:, 1, 1] = 1.0
    P[0, :, :] = np.eye(3)[0]
    P[1, :, :] = np.eye(3)[1]
    return TabularMdp(P, np.zeros((3, 2)), 2, 2)


def test_mixture_of_disjoint_policies_is_even_split():
    mdp = disjoint_mdp()
    cover = PolicyCover([TabularPolicy.from_actions(np.zeros((2, 3), int), 2),
                         TabularPolicy.from_actions(np.ones((2, 3), int), 2)])
    n = 100_000
    b = mixture_transitions(cover, mdp, n, stream(0, "mix"))
    emp = np.bincount(b.states, minlength=3) / n
    exact = 0.5 * occupancy(cover.policies[0], mdp).sum(1) + 0.5 * occupancy(cover.policies[1], mdp).sum(1)
    assert np.allclose(exact, [0.25, 0.25, 0.5])
    assert 0.5 * np.abs(emp - exact).sum() <= 0.01


def test_repeated_policies_match_single_policy_law():
    rng = stream(7, "rep")
    mdp = random_mdp(rng)
    pi = TabularPolicy(rng.dirichlet(np.ones(2), size=(4, 3)))
    n = 50_000
    b = mixture_transitions(PolicyCover([pi, pi, pi]), mdp, n, stream(7, "rep-draw"))
    emp = np.zeros((3, 2))
    np.add.at(emp, (b.states, b.actions), 1 / n)
    assert 0.5 * np.abs(emp - occupancy(pi, mdp)).sum() <= 0.015


def test_singleton_mixture_sample_is_an_occupancy_sample():
    mdp = random_mdp(stream(8))
    pi = TabularPolicy.uniform(4, 3, 2)
    smp = mixture_sample(PolicyCover([pi]), mdp, stream(8))
    assert 0 <= smp.state < 3 and 0 <= smp.step < 4


def test_empty_cover_cannot_be_sampled():
    with pytest.raises(ValueError):
        mixture_sample(PolicyCover(), random_mdp(stream(9)), stream(9))
    with pytest.raises(ValueError):
        mixture_transitions(PolicyCover(), random_mdp(stream(9)), 3, stream(9))
