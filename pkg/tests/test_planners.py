import itertools

import numpy as np
import pytest

from pcmlp.core import TabularPolicy, rollout, stream
from pcmlp.envs import make_linear_system
from pcmlp.lemmas import DoubleIntegrator, TOY_MPPI, argmin_concentration, grid_dp_cost, mppi_episode
from pcmlp.planners import (EmptyConfidenceSet, MppiConfig, MppiPolicy, PlanningError, exhaustive_plan,
                            mppi_policy, mppi_step, optimistic_plan, tabular_plan)


def brute_force_optimum(P, R, H, s0):
    """Independent oracle: score every deterministic time-indexed policy by forward propagation."""
    S, A, _ = P.shape
    best = -np.inf
    for flat in itertools.product(range(A), repeat=H * S):
        acts = np.array(flat).reshape(H, S)
        mu = np.eye(S)[s0]
        v = 0.0
        for h in range(H):
            v += mu @ R[np.arange(S), acts[h]]
            mu = mu @ P[np.arange(S), acts[h]]
        best = max(best, v)
    return best


def random_instance(rng, S, A):
    return rng.dirichlet(np.ones(S), size=(S, A)), rng.uniform(size=(S, A))


# ---------------------------------------------------------------------------
# MPPI
# ---------------------------------------------------------------------------

def zero_reward(S, A):
    return np.zeros(len(S))


def drift(S, A):
    return S + A


def test_single_sample_has_unit_weight():
    cfg = MppiConfig(K=1, T=5)
    out = mppi_step(cfg, np.zeros((5, 1)), drift, lambda S, A: -np.sum(S**2, 1), np.ones(1), stream(0))
    assert out.weights.tolist() == [1.0]


def test_equal_costs_give_uniform_weights():
    cfg = MppiConfig(K=50, T=4)
    out = mppi_step(cfg, np.zeros((4, 1)), drift, zero_reward, np.zeros(1), stream(0))
    assert np.allclose(out.weights, 1 / 50, rtol=0, atol=1e-15)


def test_nominal_is_shifted_with_zero_tail():
    cfg = MppiConfig(K=10, T=4)
    out = mppi_step(cfg, np.ones((4, 1)), drift, zero_reward, np.zeros(1), stream(1))
    assert out.nominal[-1, 0] == 0.0
    assert out.nominal.shape == (4, 1)


def test_weights_sum_to_one_every_step():
    sys = DoubleIntegrator()
    cfg = MppiConfig(action_dim=1, action_low=-1.0, action_high=1.0, **TOY_MPPI)
    _, sums = mppi_episode(sys, cfg, seed=3)
    assert np.max(np.abs(sums - 1.0)) <= 1e-12


def test_low_temperature_concentrates_on_best_sample():
    assert argmin_concentration(seed=0, lam=1e-6) <= 1e-3


def test_low_temperature_update_matches_best_perturbation():
    cfg = MppiConfig(K=30, T=3, lam=1e-6)
    nominal = np.zeros((3, 1))
    reward = lambda S, A: -np.sum((S - 2.0) ** 2, 1)
    out = mppi_step(cfg, nominal, drift, reward, np.zeros(1), stream(4))
    # replay the same draws to recover the perturbations
    eps = stream(4).standard_normal((30, 3, 1)) * np.sqrt(0.3)
    k = int(np.argmin(out.costs))
    expect = (nominal + eps[k])[1:, 0]
    assert np.allclose(out.nominal[:-1, 0], expect, atol=1e-3)


def test_mppi_is_near_grid_dp_optimum():
    sys = DoubleIntegrator()
    cfg = MppiConfig(action_dim=1, action_low=-1.0, action_high=1.0, **TOY_MPPI)
    cost, _ = mppi_episode(sys, cfg, seed=0)
    opt = grid_dp_cost(sys)
    assert sys.lqr_cost() <= opt
    assert cost <= 1.10 * opt


def test_nan_model_reports_sample_and_step():
    cfg = MppiConfig(K=3, T=4)
    boom = lambda S, A: np.where(np.arange(len(S))[:, None] == 2, np.nan, S) if S[0, 0] > 0.5 else S + 1
    with pytest.raises(PlanningError) as err:
        mppi_step(cfg, np.zeros((4, 1)), boom, zero_reward, np.zeros(1), stream(0))
    assert (err.value.sample, err.value.step) == (2, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        MppiConfig(K=0)
    with pytest.raises(ValueError):
        MppiConfig(lam=0.0)
    with pytest.raises(ValueError):
        MppiConfig(sigma=-0.3)


def test_policy_resets_between_rollouts():
    env = make_linear_system(seed=0)
    pol = mppi_policy(MppiConfig(K=20, T=5), env.truth, env.reward_batch, env.horizon)
    t1 = rollout(pol, env.mdp, stream(2, "roll"))
    t2 = rollout(pol, env.mdp, stream(2, "roll"))
    assert np.array_equal(np.array(t1.states), np.array(t2.states))


def test_long_shooting_horizon_is_clipped_to_the_episode():
    env = make_linear_system(seed=1, horizon=8)
    long = MppiPolicy(MppiConfig(K=20, T=50), env.truth, env.reward_batch, 8)
    exact = MppiPolicy(MppiConfig(K=20, T=8), env.truth, env.reward_batch, 8)
    t1 = rollout(long, env.mdp, stream(5, "clip"))
    t2 = rollout(exact, env.mdp, stream(5, "clip"))
    assert np.array_equal(np.array(t1.actions), np.array(t2.actions))


def test_zero_reward_keeps_nominal_near_zero():
    cfg = MppiConfig(K=400, T=10)
    nominal = np.zeros((10, 1))
    rng = stream(6, "zero")
    for _ in range(20):
        out = mppi_step(cfg, nominal, drift, zero_reward, np.zeros(1), rng)
        nominal = out.nominal
    # each slot is a running sum of at most T uniform-weight averages of N(0, 0.3) noise
    assert np.max(np.abs(nominal)) <= 4 * np.sqrt(10 * 0.3 / 400)


# ---------------------------------------------------------------------------
# tabular planning
# ---------------------------------------------------------------------------

def test_horizon_one_is_greedy():
    P, R = random_instance(stream(0, "greedy"), 4, 3)
    plan = tabular_plan(P, R, 1, initial_state=2)
    assert plan.policy.table[0, 2].argmax() == R[2].argmax()
    assert plan.value == R[2].max()


def test_ties_go_to_lowest_action():
    P, _ = random_instance(stream(1), 3, 3)
    plan = tabular_plan(P, np.full((3, 3), 0.5), 3)
    assert np.all(plan.policy.table[..., 0] == 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_enumeration_agrees_with_brute_force(seed):
    P, R = random_instance(stream(seed, "bf"), 3, 2)
    value, _ = exhaustive_plan(P, R, 3)
    assert value == pytest.approx(brute_force_optimum(P, R, 3, 0), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_tabular_plan_matches_exhaustive_enumeration(seed):
    P, R = random_instance(stream(seed, "dp"), 5, 3)
    value, _ = exhaustive_plan(P, R, 3)
    assert abs(tabular_plan(P, R, 3).value - value) <= 1e-10


def test_tabular_plan_rejects_bad_shapes():
    with pytest.raises(TypeError):
        tabular_plan(np.ones((2, 2)), np.ones((2, 2)), 2)


# ---------------------------------------------------------------------------
# optimistic planning
# ---------------------------------------------------------------------------

def test_single_candidate_reduces_to_tabular_plan():
    P, R = random_instance(stream(2), 3, 2)
    opt = optimistic_plan([P], [0], R, 3)
    plan = tabular_plan(P, R, 3)
    assert opt.model_index == 0 and opt.value == plan.value
    assert np.array_equal(opt.policy.table, plan.policy.table)


def test_optimistic_value_dominates_truth():
    rng = stream(3, "opt")
    P, R = random_instance(rng, 3, 2)
    # pessimistic model: every action leads to the worst-reward state
    worst = np.argmin(R.max(1))
    Q = np.zeros_like(P)
    Q[:, :, worst] = 1.0
    opt = optimistic_plan([Q, P], [0, 1], R, 3)
    assert opt.value >= tabular_plan(P, R, 3).value - 1e-12


def test_joint_argmax_matches_brute_force_over_pairs():
    rng = stream(4, "pairs")
    tables = [rng.dirichlet(np.ones(3), size=(3, 2)) for _ in range(3)]
    R = rng.uniform(size=(3, 2))
    H = 2
    policies = [TabularPolicy.from_actions(np.array(flat).reshape(H, 3), 2)
                for flat in itertools.product(range(2), repeat=H * 3)]
    opt = optimistic_plan(tables, [0, 1, 2], R, H, policies=policies)
    best = max(brute_force_optimum(P, R, H, 0) for P in tables)
    assert opt.value == pytest.approx(best, abs=1e-12)
    assert opt.value == pytest.approx(optimistic_plan(tables, [0, 1, 2], R, H).value, abs=1e-12)


def test_empty_confidence_set_raises():
    P, R = random_instance(stream(5), 2, 2)
    with pytest.raises(EmptyConfidenceSet):
        optimistic_plan([P], [], R, 2)
