"""Desk-scale environments: linear KNR systems, a sparse-reward hill climb, tabular linear MDPs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .core import MdpSpec, TabularMdp, TabularPolicy, UniformPolicy
from .features import FeatureMap, LinearFeatures, OneHotFeatures, rff_new
from .models import KnrModel, LinearMdpModel


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Axis-aligned grid over a box; states outside are clipped into the edge cells."""

    low: np.ndarray
    high: np.ndarray
    bins: tuple

    def __post_init__(self):
        object.__setattr__(self, "low", np.asarray(self.low, dtype=float))
        object.__setattr__(self, "high", np.asarray(self.high, dtype=float))
        object.__setattr__(self, "bins", tuple(int(b) for b in np.broadcast_to(self.bins, self.low.shape)))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.bins))

    def cell_index(self, states) -> np.ndarray:
        X = np.atleast_2d(np.asarray(states, dtype=float))
        frac = (X - self.low) / (self.high - self.low)
        idx = np.clip(np.floor(frac * self.bins).astype(int), 0, np.array(self.bins) - 1)
        return np.ravel_multi_index(idx.T, self.bins)


@dataclass(frozen=True, eq=False)
class Environment:
    """A catalog entry: the true MDP plus everything the learner is allowed to know.

    ``family`` is ``"knr"``, ``"linmdp"`` or ``"blackbox"``. ``truth`` holds
    the ground-truth model when the environment is realisable.
    ``reward_batch(S, A)`` evaluates rewards for stacked inputs (used by the
    planner). ``grid`` is an int (tabular) or a :class:`GridSpec`.
    """

    name: str
    family: str
    mdp: object
    feature: FeatureMap
    truth: object = None
    reward_batch: Callable | None = None
    action_dim: int = 1
    action_low: float | None = None
    action_high: float | None = None
    goal: Callable | None = None
    grid: object = None
    knr_F: float | None = None
    knr_sigma: float | None = None
    residual: bool = False
    defaults: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    @property
    def tabular(self) -> bool:
        return isinstance(self.mdp, TabularMdp)

    def uniform_policy(self):
        if self.tabular:
            return TabularPolicy.uniform(self.horizon, self.mdp.n_states, self.mdp.n_actions)
        return UniformPolicy(np.full(self.action_dim, self.action_low, dtype=float),
                             np.full(self.action_dim, self.action_high, dtype=float))


# ---------------------------------------------------------------------------
# coverage
# ---------------------------------------------------------------------------

def visited_states(trajectories) -> list:
    out = []
    for traj in trajectories:
        if not len(traj):
            continue
        out.extend(traj.states)
        out.append(traj.steps[-1].next_state)
    return out


def coverage_metric(trajectories, grid) -> float:
    """Fraction of grid cells touched by any state of any trajectory.

    ``grid`` is the number of states for tabular problems or a :class:`GridSpec`.
    """
    states = visited_states(trajectories)
    return coverage_of_states(states, grid)


def coverage_of_states(states, grid) -> float:
    if isinstance(grid, (int, np.integer)):
        n_cells = int(grid)
        cells = np.unique(np.asarray(states, dtype=int)) if len(states) else []
    else:
        n_cells = grid.n_cells
        cells = np.unique(grid.cell_index(states)) if len(states) else []
    return len(cells) / n_cells


# ---------------------------------------------------------------------------
# linear system
# ---------------------------------------------------------------------------

def _slow_rotation(rng: np.random.Generator, n: int, radius: float, twist: float) -> np.ndarray:
    """``radius`` times a random orthogonal matrix near the identity (all |eigenvalues| = radius)."""
    G = rng.standard_normal((n, n)) * twist
    return radius * expm(0.5 * (G - G.T))


def make_linear_system(d_s: int = 1, d_a: int = 1, sigma: float = 0.05, seed: int = 0,
                       horizon: int = 60, spectral_radius: float = 0.95, twist: float = 0.2,
                       state_radius: float = 2.5,
                       A=None, B=None, initial_state=None, goal=None, action_bound: float = 1.0,
                       dc_gain: float = 3.0, goal_action: float = 0.8,
                       reward_scale: float = 4.0) -> Environment:
    """Stochastic linear system ``s' = A s + B a + N(0, sigma^2 I)`` written as a KNR.

    Features are ``[s, a] / state_radius`` (saturating outside that ball), so
    ``W* = state_radius [A B]`` reproduces the linear dynamics exactly inside
    the ball. Reward ``max(0, 1 - ||s - goal||^2 / reward_scale)``.

    The default ``A`` is a slow contraction (slightly rotating when
    ``d_s > 1``), so random actions mostly cancel while sustained ones travel
    far. By default ``B`` is scaled so the steady-state gain ``||(I - A)^-1 B||``
    equals ``dc_gain`` and the goal is the equilibrium under the constant
    action ``goal_action`` (along the first singular direction), which puts
    it well away from the start yet keeps it reachable.
    """
    rng = np.random.default_rng(seed)
    if A is None:
        A = _slow_rotation(rng, d_s, spectral_radius, twist)
    A = np.asarray(A, float).reshape(d_s, d_s)
    if A.size and max(abs(np.linalg.eigvals(A))) > 0.95 + 1e-12:
        raise ValueError("A must have spectral radius <= 0.95")
    if B is None:
        B = rng.standard_normal((d_s, d_a))
        B *= dc_gain / np.linalg.norm(np.linalg.solve(np.eye(d_s) - A, B), 2)
    B = np.asarray(B, float).reshape(d_s, d_a)
    if goal is None:
        G = np.linalg.solve(np.eye(d_s) - A, B)
        _, _, Vt = np.linalg.svd(G)
        goal = G @ (goal_action * Vt[0])
    goal = np.asarray(goal, dtype=float)
    s0 = np.zeros(d_s) if initial_state is None else np.asarray(initial_state, dtype=float)
    feature = LinearFeatures(state_radius, d_s + d_a)
    W = state_radius * np.hstack([A, B])
    F = max(float(np.linalg.norm(W)), 1e-12) * 1.5
    truth = KnrModel(W, sigma, F, feature)

    def dynamics(s, a, g):
        return truth.step(np.asarray(s, float), np.asarray(a, float).reshape(d_a), g)

    def reward_batch(S, A_):
        S = np.atleast_2d(S)
        return np.clip(1.0 - np.sum((S - goal) ** 2, axis=1) / reward_scale, 0.0, 1.0)

    mdp = MdpSpec(horizon, s0, lambda s, a: float(reward_batch(s, a)[0]), dynamics, d_s)
    lim = 3 * state_radius
    return Environment(
        "linear_system", "knr", mdp, feature, truth, reward_batch, d_a, -action_bound, action_bound,
        goal=lambda s: float(np.sum((np.asarray(s) - goal) ** 2)) <= 0.25 * reward_scale,
        grid=GridSpec(np.full(d_s, -lim / 2), np.full(d_s, lim / 2), 10),
        knr_F=F, knr_sigma=sigma,
        defaults=dict(K=300, M=300, lam=0.01, bonus_scale=1.0, fitter="least_squares",
                      data_mode="replay", sample_mode="trajectory"))


# ---------------------------------------------------------------------------
# sparse hill climb
# ---------------------------------------------------------------------------

HILL_X = (-1.2, 0.6)
HILL_V = 0.07
HILL_GOAL = 0.45


def hill_step(S: np.ndarray, A: np.ndarray, power: float = 0.0015) -> np.ndarray:
    """Batched valley dynamics on stacked ``(x, v)`` rows."""
    S = np.atleast_2d(S)
    u = np.clip(np.asarray(A, dtype=float).reshape(len(S)), -1.0, 1.0)
    x, v = S[:, 0], S[:, 1]
    v = np.clip(v + power * u - 0.0025 * np.cos(3 * x), -HILL_V, HILL_V)
    x = x + v
    v = np.where((x <= HILL_X[0]) & (v < 0), 0.0, v)
    v = np.where((x >= HILL_X[1]) & (v > 0), 0.0, v)
    x = np.clip(x, *HILL_X)
    return np.stack([x, v], axis=1)


def hill_reward(S, A, goal_reward: float = 0.9, effort_weight: float = 0.1) -> np.ndarray:
    """Per-step reward in [0, 1]: ``goal_reward`` inside the goal region plus an effort term."""
    S = np.atleast_2d(S)
    u = np.clip(np.asarray(A, dtype=float).reshape(len(S)), -1.0, 1.0)
    return goal_reward * (S[:, 0] >= HILL_GOAL) + effort_weight * (1.0 - u**2)


def bang_bang(s, h, rng) -> np.ndarray:
    """Push in the direction of motion (left when at rest)."""
    return np.array([1.0 if s[1] > 0 else -1.0])


def make_sparse_hill(seed: int = 0, horizon: int = 100, noise: float = 0.0, rff_dim: int = 40,
                     bandwidth: float = 0.5) -> Environment:
    """Two-dimensional valley: reach ``x >= 0.45`` from the bottom under a small effort cost.

    Gravity is stronger than the motor, so the goal is only reachable by
    swinging back and forth. The learner sees residual random Fourier
    features of the rescaled ``(x, v, u)``.
    """
    rng = np.random.default_rng(seed)
    s0 = np.array([-0.5, 0.0])

    def dynamics(s, a, g):
        nxt = hill_step(np.asarray(s, float)[None], np.asarray(a, float).reshape(1))[0]
        if noise > 0:
            nxt = nxt + noise * np.array([0.0, HILL_V]) * g.standard_normal(2)
        return nxt

    mdp = MdpSpec(horizon, s0, lambda s, a: float(hill_reward(s, a)[0]), dynamics, 2)
    feature = rff_new(3, rff_dim, bandwidth, seed=int(rng.integers(2**31)),
                      input_scale=np.array([0.9, HILL_V, 1.0]))
    return Environment(
        "sparse_hill", "blackbox", mdp, feature, None, hill_reward, 1, -1.0, 1.0,
        goal=lambda s: float(np.asarray(s)[0]) >= HILL_GOAL,
        grid=GridSpec([HILL_X[0], -HILL_V], [HILL_X[1], HILL_V], (12, 12)),
        knr_F=1.0, knr_sigma=max(noise, 1e-3) * HILL_V, residual=True,
        defaults=dict(K=200, M=400, lam=0.01, bonus_scale=5.0, fitter="least_squares",
                      data_mode="replay", sample_mode="trajectory", eval_rollouts=2,
                      model_rollouts=0))


# ---------------------------------------------------------------------------
# tabular linear MDPs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularLinmdp:
    env: Environment
    candidates: LinearMdpModel
    truth_index: int


def _decoy(P: np.ndarray, gap: float, targets: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Move ``gap`` mass in every row from ``sources[s, a]`` to ``targets[s, a]``."""
    Q = P.copy()
    S, A, _ = P.shape
    ii, jj = np.meshgrid(np.arange(S), np.arange(A), indexing="ij")
    Q[ii, jj, sources] -= gap
    Q[ii, jj, targets] += gap
    return Q


def make_tabular_linmdp(n_states: int = 4, n_actions: int = 2, n_candidates: int = 4, seed: int = 0,
                        gap: float = 0.2, horizon: int = 3, concentration: float = 1.0) -> TabularLinmdp:
    """Random tabular MDP plus decoy candidates, embedded as a linear MDP with one-hot features.

    In each row the decoys move ``gap`` probability from the row's largest
    entry to distinct other states, so every decoy sits at TV exactly ``gap``
    from the truth and from every other decoy. The truth's position in the
    candidate list is drawn from the seed.
    """
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    if n_candidates > n_states:
        raise ValueError("at most n_states candidates can be kept at a common distance")
    if not 0 <= gap <= 0.5:
        raise ValueError("gap must lie in [0, 0.5]")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    # the largest entry of each row must be able to give away `gap`
    low = P.max(-1) < gap
    while low.any():
        P[low] = rng.dirichlet(np.full(n_states, concentration), size=int(low.sum()))
        low = P.max(-1) < gap
    R = rng.uniform(size=(n_states, n_actions))
    sources = P.argmax(-1)
    others = np.array([[np.setdiff1d(np.arange(n_states), [src])[rng.permutation(n_states - 1)]
                        for src in row] for row in sources])
    tables = [_decoy(P, gap, others[..., k], sources) for k in range(n_candidates - 1)]
    truth_index = int(rng.integers(n_candidates))
    tables.insert(truth_index, P)
    model = LinearMdpModel.from_tables(tables, truth_index)
    mdp = TabularMdp(model.transition_table(), R, horizon, 0)
    env = Environment("tabular_linmdp", "linmdp", mdp, OneHotFeatures(n_states, n_actions), model,
                      grid=n_states, defaults=dict(K=2000, M=500, lam=1.0, bonus_scale=1.0))
    return TabularLinmdp(env, model, truth_index)


def make_chain(n_states: int = 20, horizon: int = 6) -> Environment:
    """Line of states: action 0 steps left, action 1 steps right, walls reflect.

    Under the uniform policy this is a simple random walk started at 0.
    """
    P = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, n_states - 1)] = 1.0
    R = np.zeros((n_states, 2))
    R[n_states - 1] = 1.0
    mdp = TabularMdp(P, R, horizon, 0)
    return Environment("chain", "linmdp", mdp, OneHotFeatures(n_states, 2),
                       LinearMdpModel.from_tables([P]), grid=n_states,
                       defaults=dict(K=500, M=500, lam=1.0, bonus_scale=1.0))


CATALOG = {
    "linear_system": (make_linear_system, "knr", "stable linear system with quadratic goal reward"),
    "sparse_hill": (make_sparse_hill, "blackbox", "valley climb with effort cost and goal-only reward"),
    "tabular_linmdp": (lambda seed=0, **kw: make_tabular_linmdp(seed=seed, **kw).env, "linmdp",
                       "random tabular MDP with TV-separated decoy candidates"),
    "chain": (lambda seed=0, **kw: make_chain(**kw), "linmdp", "deterministic left/right chain"),
}


def make_env(name: str, seed: int = 0, **kwargs) -> Environment:
    if name not in CATALOG:
        raise KeyError(f"unknown environment {name!r}; choose from {sorted(CATALOG)}")
    return CATALOG[name][0](seed=seed, **kwargs)
