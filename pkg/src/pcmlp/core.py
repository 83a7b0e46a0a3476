"""Episodic finite-horizon MDPs: policies, rollouts, occupancy sampling and exact evaluation.

Two MDP flavours share one duck-typed surface (``horizon``, ``initial_state``,
``reward(s, a)``, ``step(s, a, rng)``):

* :class:`MdpSpec` wraps arbitrary callables (continuous or black-box dynamics).
* :class:`TabularMdp` holds an explicit transition table and supports exact
  dynamic-programming evaluation.

All randomness is passed in as ``numpy.random.Generator`` objects.
"""

from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

Action = Any
State = Any
ActFn = Callable[[State, int, np.random.Generator], Action]


class RolloutError(RuntimeError):
    """Dynamics produced a non-finite state."""

    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class UnsupportedModelError(TypeError):
    pass


# ---------------------------------------------------------------------------
# random streams and worker pool
# ---------------------------------------------------------------------------

def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator keyed by ``seed`` and a path of names.

    The same ``(seed, names)`` always yields the same stream, and different
    name paths give statistically independent streams.
    """
    key = tuple(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed) % 2**64, spawn_key=key))


_THREADS = max(1, int(os.environ.get("PCMLP_THREADS", "1") or 1))


def set_threads(n: int) -> None:
    global _THREADS
    _THREADS = max(1, int(n))


def get_threads() -> int:
    return _THREADS


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Ordered map, threaded when more than one worker is configured.

    Results come back in input order, so outputs do not depend on the
    thread count as long as every item carries its own random stream.
    """
    items = list(items)
    if _THREADS == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_THREADS) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# MDPs
# ---------------------------------------------------------------------------

_clamp_warned: set[int] = set()


def _clamp_reward(r: float, owner: object) -> float:
    if 0.0 <= r <= 1.0:
        return r
    if id(owner) not in _clamp_warned:
        _clamp_warned.add(id(owner))
        logger.warning("reward %.6g outside [0, 1] clamped (further clamps not logged)", r)
    return min(1.0, max(0.0, r))


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """Finite-horizon MDP with a fixed start state and black-box dynamics.

    ``dynamics(s, a, rng)`` samples a next state. ``reward_fn(s, a)`` should
    lie in [0, 1]; small overshoots are clamped with a warning.
    """

    horizon: int
    initial_state: State
    reward_fn: Callable[[State, Action], float]
    dynamics: Callable[[State, Action, np.random.Generator], State]
    state_dim: int | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def reward(self, s: State, a: Action) -> float:
        return _clamp_reward(float(self.reward_fn(s, a)), self)

    def step(self, s: State, a: Action, rng: np.random.Generator) -> State:
        return self.dynamics(s, a, rng)

    def with_reward(self, reward_fn) -> "MdpSpec":
        return MdpSpec(self.horizon, self.initial_state, reward_fn, self.dynamics, self.state_dim)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Tabular MDP with stationary transitions ``P[s, a, s']`` and rewards ``R[s, a]``."""

    P: np.ndarray
    R: np.ndarray
    horizon: int
    initial_state: int = 0
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"P must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValueError(f"R must have shape {P.shape[:2]}, got {R.shape}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 <= self.initial_state < P.shape[0]:
            raise ValueError("initial_state out of range")
        if np.any(P < -1e-12) or not np.allclose(P.sum(-1), 1.0, atol=1e-9):
            raise ValueError("rows of P must be probability vectors")
        if np.any(R < 0) or np.any(R > 1):
            logger.warning("tabular rewards outside [0, 1] clamped")
            R = np.clip(R, 0.0, 1.0)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        cdf = np.cumsum(P, axis=-1)
        cdf[..., -1] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def reward(self, s: int, a: int) -> float:
        return float(self.R[s, a])

    def step(self, s: int, a: int, rng: np.random.Generator) -> int:
        return int(np.searchsorted(self._cdf[s, a], rng.random(), side="right"))

    def step_batch(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(len(s))
        cdf = self._cdf[s, a]
        return np.minimum((cdf <= u[:, None]).sum(axis=1), self.n_states - 1)

    def replace(self, P=None, R=None) -> "TabularMdp":
        return TabularMdp(self.P if P is None else P, self.R if R is None else R,
                          self.horizon, self.initial_state)


def check_same_space(a: TabularMdp, b: TabularMdp) -> None:
    if a.P.shape != b.P.shape or a.horizon != b.horizon or a.initial_state != b.initial_state:
        raise ValueError(
            f"MDPs differ in shape/horizon/start: {a.P.shape}, H={a.horizon} vs {b.P.shape}, H={b.horizon}")


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class Policy(Protocol):
    def episode(self) -> ActFn:
        """Fresh per-episode action function ``act(state, step, rng)``."""


@dataclass(frozen=True, eq=False)
class FunctionPolicy:
    """Stateless policy given by an explicit map ``(state, step, rng) -> action``."""

    fn: ActFn

    def episode(self) -> ActFn:
        return self.fn


@dataclass(frozen=True, eq=False)
class UniformPolicy:
    """Uniform random actions in a box."""

    low: np.ndarray
    high: np.ndarray

    def episode(self) -> ActFn:
        low = np.asarray(self.low, dtype=float)
        high = np.asarray(self.high, dtype=float)
        return lambda s, h, rng: rng.uniform(low, high)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Time-indexed tabular policy, ``table[h, s, a] = pi_h(a | s)``."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.ndim != 3 or not np.allclose(t.sum(-1), 1.0, atol=1e-9) or np.any(t < 0):
            raise ValueError("table must have shape (H, S, A) with rows summing to 1")
        object.__setattr__(self, "table", t)

    @classmethod
    def from_actions(cls, actions: np.ndarray, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(n_actions)[actions])

    @classmethod
    def uniform(cls, horizon: int, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((horizon, n_states, n_actions), 1.0 / n_actions))

    @property
    def horizon(self) -> int:
        return self.table.shape[0]

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(self.table.max(-1) == 1.0))

    def act(self, s: int, h: int, rng: np.random.Generator) -> int:
        row = self.table[h, s]
        if row.max() == 1.0:
            return int(row.argmax())
        return int(np.searchsorted(np.cumsum(row)[:-1], rng.random(), side="right"))

    def act_batch(self, s: np.ndarray, h: np.ndarray | int, rng: np.random.Generator) -> np.ndarray:
        cdf = np.cumsum(self.table[h, s], axis=-1)
        u = rng.random(len(s))
        return np.minimum((cdf <= u[:, None]).sum(axis=1), self.table.shape[2] - 1)

    def episode(self) -> ActFn:
        return self.act


# ---------------------------------------------------------------------------
# rollouts and occupancy sampling
# ---------------------------------------------------------------------------

class Transition(NamedTuple):
    state: State
    action: Action
    reward: float
    next_state: State


@dataclass
class Trajectory:
    steps: list[Transition]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def total_reward(self) -> float:
        return float(sum(t.reward for t in self.steps))

    @property
    def states(self) -> list:
        return [t.state for t in self.steps]

    @property
    def actions(self) -> list:
        return [t.action for t in self.steps]


class OccupancySample(NamedTuple):
    state: State
    action: Action
    step: int


def _check_finite(s: State, h: int) -> None:
    if isinstance(s, np.ndarray) and not np.all(np.isfinite(s)):
        raise RolloutError(h)
    if isinstance(s, float) and not np.isfinite(s):
        raise RolloutError(h)


def rollout(policy: Policy, mdp, rng: np.random.Generator, n_steps: int | None = None) -> Trajectory:
    """Run ``policy`` for ``n_steps`` (default: the full horizon) from the start state."""
    n = mdp.horizon if n_steps is None else n_steps
    act = policy.episode()
    s = mdp.initial_state
    steps = []
    for h in range(n):
        a = act(s, h, rng)
        r = mdp.reward(s, a)
        s_next = mdp.step(s, a, rng)
        _check_finite(s_next, h)
        steps.append(Transition(s, a, r, s_next))
        s = s_next
    return Trajectory(steps)


def d_pi_sample(policy: Policy, mdp, rng: np.random.Generator) -> OccupancySample:
    """One draw from the time-averaged occupancy ``d^pi = sum_h d^pi_h / H``.

    Draws ``h`` uniformly from ``{0..H-1}``, runs the policy for ``h`` steps and
    returns ``(s_h, a_h, h)``.
    """
    h = int(rng.integers(mdp.horizon))
    act = policy.episode()
    s = mdp.initial_state
    for t in range(h):
        s_next = mdp.step(s, act(s, t, rng), rng)
        _check_finite(s_next, t)
        s = s_next
    return OccupancySample(s, act(s, h, rng), h)


def sample_occupancy_tabular(policy: TabularPolicy, mdp: TabularMdp, n: int,
                             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised ``n`` independent draws of :func:`d_pi_sample` for tabular problems.

    Returns arrays ``(states, actions, steps)``.
    """
    H = mdp.horizon
    h = rng.integers(H, size=n)
    s = np.full(n, mdp.initial_state, dtype=int)
    for t in range(H - 1):
        live = h > t
        if not live.any():
            break
        idx = np.flatnonzero(live)
        a = policy.act_batch(s[idx], t, rng)
        s[idx] = mdp.step_batch(s[idx], a, rng)
    a = policy.act_batch(s, h, rng)
    return s, a, h


def estimate_value(policy: Policy, mdp, n_rollouts: int,
                   rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo ``J(pi)``: mean total reward and its standard error."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rngs = rng.spawn(n_rollouts)
    returns = np.array(parallel_map(lambda g: rollout(policy, mdp, g).total_reward, rngs))
    se = float(returns.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(returns.mean()), se


# ---------------------------------------------------------------------------
# exact tabular evaluation
# ---------------------------------------------------------------------------

def _as_table(policy, H: int) -> np.ndarray:
    if not isinstance(policy, TabularPolicy):
        raise UnsupportedModelError("exact evaluation needs a TabularPolicy")
    if policy.horizon < H:
        raise ValueError("policy horizon shorter than MDP horizon")
    return policy.table[:H]


def policy_values(policy: TabularPolicy, P: np.ndarray, R: np.ndarray, H: int) -> np.ndarray:
    """``V[h, s]`` for h = 0..H (``V[H] = 0``) by backward induction."""
    pi = _as_table(policy, H)
    V = np.zeros((H + 1, P.shape[0]))
    for h in range(H - 1, -1, -1):
        Q = R + P @ V[h + 1]
        V[h] = (pi[h] * Q).sum(-1)
    return V


def exact_value_tabular(policy: TabularPolicy, mdp: TabularMdp) -> float:
    """Exact ``J(pi; r, P)`` by backward induction."""
    if not isinstance(mdp, TabularMdp):
        raise UnsupportedModelError("exact evaluation needs a TabularMdp")
    return float(policy_values(policy, mdp.P, mdp.R, mdp.horizon)[0, mdp.initial_state])


def occupancy_by_step(policy: TabularPolicy, mdp: TabularMdp) -> np.ndarray:
    """Exact ``d^pi_h(s, a)`` for every h, shape ``(H, S, A)``, by forward recursion."""
    if not isinstance(mdp, TabularMdp):
        raise UnsupportedModelError("exact occupancy needs a TabularMdp")
    H = mdp.horizon
    pi = _as_table(policy, H)
    d = np.zeros((H, mdp.n_states, mdp.n_actions))
    mu = np.zeros(mdp.n_states)
    mu[mdp.initial_state] = 1.0
    for h in range(H):
        d[h] = mu[:, None] * pi[h]
        mu = np.einsum("sa,sat->t", d[h], mdp.P)
    return d


def occupancy(policy: TabularPolicy, mdp: TabularMdp) -> np.ndarray:
    """Exact time-averaged occupancy ``d^pi(s, a)``."""
    return occupancy_by_step(policy, mdp).mean(axis=0)


class SimulationGap(NamedTuple):
    lhs: float
    rhs: float


def simulation_gap(policy: TabularPolicy, mdp_true: TabularMdp, mdp_model: TabularMdp) -> SimulationGap:
    """Both sides of the simulation lemma, computed exactly.

    ``lhs = J(pi; r_hat, P_hat) - J(pi; r, P)`` and
    ``rhs = sum_h E_{d_h^pi}[r_hat - r + (P_hat - P) . V_hat_{h+1}]`` where the
    occupancy is taken under the true MDP and ``V_hat`` is the model's value.
    """
    check_same_space(mdp_true, mdp_model)
    H = mdp_true.horizon
    lhs = exact_value_tabular(policy, mdp_model) - exact_value_tabular(policy, mdp_true)
    V_hat = policy_values(policy, mdp_model.P, mdp_model.R, H)
    d = occupancy_by_step(policy, mdp_true)
    rhs = 0.0
    for h in range(H):
        gap = mdp_model.R - mdp_true.R + (mdp_model.P - mdp_true.P) @ V_hat[h + 1]
        rhs += float((d[h] * gap).sum())
    return SimulationGap(lhs, rhs)
