"""Planning oracles: MPPI for continuous models, exact dynamic programming for tabular ones."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .core import TabularPolicy, policy_values

# ---------------------------------------------------------------------------
# MPPI
# ---------------------------------------------------------------------------

BatchDynamics = Callable[[np.ndarray, np.ndarray], np.ndarray]
BatchReward = Callable[[np.ndarray, np.ndarray], np.ndarray]
# fused ``(S, A) -> (rewards, next_states)``, lets callers share feature evaluations
BatchStep = Callable[[np.ndarray, np.ndarray], tuple]


class PlanningError(RuntimeError):
    def __init__(self, sample: int, step: int):
        super().__init__(f"model rollout produced a non-finite state for sample {sample} at step {step}")
        self.sample = sample
        self.step = step


@dataclass(frozen=True)
class MppiConfig:
    """MPPI settings. ``sigma`` is a scalar (times identity) or a full covariance.

    ``clip_to_horizon`` shortens the shooting horizon to the steps left in
    the episode. ``action_low`` / ``action_high`` clip perturbed actions
    before they reach the model.
    """

    K: int = 200
    T: int = 30
    lam: float = 0.2
    sigma: float | tuple = 0.3
    action_dim: int = 1
    action_low: float | tuple | None = None
    action_high: float | tuple | None = None
    clip_to_horizon: bool = True

    def __post_init__(self):
        if self.K < 1 or self.T < 1:
            raise ValueError("K and T must be >= 1")
        if self.lam <= 0:
            raise ValueError("temperature must be positive")
        cov = self.covariance()
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("noise covariance must be positive definite")

    def covariance(self) -> np.ndarray:
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim == 0:
            return float(s) * np.eye(self.action_dim)
        s = s.reshape(self.action_dim, self.action_dim)
        return 0.5 * (s + s.T)

    def bounds(self):
        if self.action_low is None and self.action_high is None:
            return None
        lo = -np.inf if self.action_low is None else np.asarray(self.action_low, float)
        hi = np.inf if self.action_high is None else np.asarray(self.action_high, float)
        return (np.broadcast_to(lo, (self.action_dim,)), np.broadcast_to(hi, (self.action_dim,)))


class MppiStep(NamedTuple):
    action: np.ndarray
    nominal: np.ndarray
    weights: np.ndarray
    costs: np.ndarray


def mppi_step(cfg: MppiConfig, nominal: np.ndarray, dynamics: BatchDynamics | None,
              reward: BatchReward | None, s0, rng: np.random.Generator,
              step: BatchStep | None = None) -> MppiStep:
    """One MPPI update from state ``s0``.

    ``nominal`` has shape ``(T', d_a)`` (``T'`` may be shorter than ``cfg.T``
    near the episode end). All ``K`` costs are accumulated first, then the
    softmin weights, then the nominal update. Returns the first action and
    the left-shifted nominal with a zero tail. ``step`` replaces the
    ``dynamics`` / ``reward`` pair when given.
    """
    nominal = np.asarray(nominal, dtype=float)
    T, d_a = nominal.shape
    cov = cfg.covariance()
    cov_inv = np.linalg.inv(cov)
    chol = np.linalg.cholesky(cov)
    eps = rng.standard_normal((cfg.K, T, d_a)) @ chol.T
    bounds = cfg.bounds()
    actions = nominal + eps
    if bounds is not None:
        actions = np.clip(actions, *bounds)
    # control cost lam * a_t^T Sigma^-1 eps_t summed over t, for every sample
    costs = cfg.lam * np.einsum("ktd,td->k", eps, nominal @ cov_inv)
    s = np.repeat(np.atleast_2d(np.asarray(s0, dtype=float)), cfg.K, axis=0)
    for t in range(T):
        a = actions[:, t]
        if step is None:
            r, s = reward(s, a), dynamics(s, a)
        else:
            r, s = step(s, a)
        costs -= r
        if not np.isfinite(s).all():
            raise PlanningError(int(np.argmax(~np.all(np.isfinite(s), axis=1))), t)
    beta = costs.min()
    w = np.exp(-(costs - beta) / cfg.lam)
    w /= w.sum()
    updated = nominal + np.einsum("k,ktd->td", w, eps)
    action = updated[0].copy()
    if bounds is not None:
        action = np.clip(action, *bounds)
    shifted = np.zeros_like(updated)
    shifted[:-1] = updated[1:]
    return MppiStep(action, shifted, w, costs)


def model_dynamics(model) -> BatchDynamics:
    """Noiseless batched dynamics from a model exposing ``mean_next`` or a plain callable."""
    if hasattr(model, "mean_next"):
        return model.mean_next
    if callable(model):
        return model
    raise TypeError(f"cannot plan with {type(model).__name__}")


@dataclass(frozen=True, eq=False)
class MppiPolicy:
    """Receding-horizon MPPI controller; the nominal sequence resets every episode."""

    cfg: MppiConfig
    model: object
    reward: BatchReward | None
    horizon: int
    step: BatchStep | None = None
    _dynamics: BatchDynamics = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_dynamics", None if self.step else model_dynamics(self.model))

    def episode(self):
        nominal = np.zeros((self.cfg.T, self.cfg.action_dim))

        def act(s, h, rng):
            nonlocal nominal
            T = min(self.cfg.T, self.horizon - h) if self.cfg.clip_to_horizon else self.cfg.T
            T = max(T, 1)
            out = mppi_step(self.cfg, nominal[:T], self._dynamics, self.reward, s, rng, self.step)
            nominal = np.zeros_like(nominal)
            nominal[:T] = out.nominal
            return out.action

        return act


def mppi_policy(cfg: MppiConfig, model, reward: BatchReward, horizon: int) -> MppiPolicy:
    return MppiPolicy(cfg, model, reward, horizon)


# ---------------------------------------------------------------------------
# tabular planning
# ---------------------------------------------------------------------------

TIE_TOL = 1e-12


class TabularPlan(NamedTuple):
    policy: TabularPolicy
    V: np.ndarray
    value: float


def _first_argmax(Q: np.ndarray) -> np.ndarray:
    """Lowest index within ``TIE_TOL`` of the row maximum."""
    return np.argmax(Q >= Q.max(axis=-1, keepdims=True) - TIE_TOL, axis=-1)


def tabular_plan(P: np.ndarray, R: np.ndarray, H: int, initial_state: int = 0) -> TabularPlan:
    """Exact finite-horizon optimum by backward induction; ties go to the lowest action."""
    P = np.asarray(P, dtype=float)
    R = np.asarray(R, dtype=float)
    if P.ndim != 3 or R.shape != P.shape[:2]:
        raise TypeError("tabular planning needs P of shape (S, A, S) and R of shape (S, A)")
    S, A, _ = P.shape
    V = np.zeros((H + 1, S))
    actions = np.zeros((H, S), dtype=int)
    for h in range(H - 1, -1, -1):
        Q = R + P @ V[h + 1]
        actions[h] = _first_argmax(Q)
        V[h] = Q[np.arange(S), actions[h]]
    return TabularPlan(TabularPolicy.from_actions(actions, A), V, float(V[0, initial_state]))


def plan_mdp(mdp, reward=None) -> TabularPlan:
    R = mdp.R if reward is None else reward
    return tabular_plan(mdp.P, R, mdp.horizon, mdp.initial_state)


def exhaustive_plan(P: np.ndarray, R: np.ndarray, H: int, initial_state: int = 0,
                    max_policies: int = 10**7) -> tuple[float, np.ndarray]:
    """Best deterministic time-indexed policy by enumerating all of them.

    The step-0 rule only matters at the fixed start state, so it ranges over
    single actions; later steps range over all ``A^S`` maps. Each policy is
    scored exactly by propagating its state distribution.
    Returns ``(value, actions)`` with ``actions`` of shape ``(H, S)``.
    """
    S, A, _ = P.shape
    step_maps = np.array(list(itertools.product(range(A), repeat=S)), dtype=int)
    total = A * len(step_maps) ** (H - 1)
    if total > max_policies:
        raise ValueError(f"{total} policies exceeds the enumeration budget")
    mu0 = np.zeros(S)
    mu0[initial_state] = 1.0
    # partial policies: list of chosen maps, current distribution, value so far
    dists = []
    values = []
    prefixes = []
    for a in range(A):
        dists.append(P[initial_state, a])
        values.append(R[initial_state, a])
        prefixes.append([np.full(S, a)])
    dists, values = np.array(dists), np.array(values)
    rows = np.arange(S)
    for h in range(1, H):
        # rewards and next distributions for every (prefix, step map)
        r_maps = R[rows, step_maps].T            # (S, n_maps)
        P_maps = P[rows, step_maps]              # (n_maps, S, S)
        values = (values[:, None] + dists @ r_maps).ravel()
        dists = np.einsum("ps,mst->pmt", dists, P_maps).reshape(-1, S)
        prefixes = [p + [m] for p in prefixes for m in step_maps]
    best = int(np.argmax(values >= values.max() - TIE_TOL))
    return float(values[best]), np.array(prefixes[best])


# ---------------------------------------------------------------------------
# optimistic planning over a finite model set
# ---------------------------------------------------------------------------

class OptimisticPlan(NamedTuple):
    policy: TabularPolicy
    model_index: int
    value: float


class EmptyConfidenceSet(ValueError):
    pass


def optimistic_plan(tables, members, R: np.ndarray, H: int, initial_state: int = 0,
                    policies=None) -> OptimisticPlan:
    """Joint ``argmax_{pi, P}`` of the value ``V^pi_P`` over ``P`` in ``members``.

    With ``policies=None`` the policy class is all time-indexed policies and
    the search reduces to each member's exact optimum. Ties go to the lowest
    model index, then the lowest policy index.
    """
    members = list(members)
    if not members:
        raise EmptyConfidenceSet("confidence set is empty")
    best = None
    for k in members:
        P = np.asarray(tables[k], dtype=float)
        if policies is None:
            plan = tabular_plan(P, R, H, initial_state)
            cand = OptimisticPlan(plan.policy, k, plan.value)
            if best is None or cand.value > best.value + TIE_TOL:
                best = cand
            continue
        for pi in policies:
            v = float(policy_values(pi, P, R, H)[0, initial_state])
            if best is None or v > best.value + TIE_TOL:
                best = OptimisticPlan(pi, k, v)
    return best
