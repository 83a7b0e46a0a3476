"""Optimistic planning over confidence regions for finite model classes, and eluder dimension."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .algorithm import IterationRecord
from .bonus import PolicyCover, mixture_transitions
from .core import (TabularMdp, TabularPolicy, UnsupportedModelError, exact_value_tabular,
                   occupancy, stream)
from .mle import TransitionDataset, exact_model_error, fit_linmdp_exact
from .planners import TIE_TOL, optimistic_plan, tabular_plan

logger = logging.getLogger(__name__)

# tolerance on the eluder thresholds, so exact ties (w == eps) count as reached
ELUDER_TOL = 1e-12


def feasibility_radius(n_models: int, N: int, M: int, delta: float) -> float:
    """Radius for the mean statistic ``(1/M) sum_{D2} ||P_hat - P||_1^2``.

    ``6 sqrt(L / M) + 2 L / M`` with ``L = ln(2 |P| N / delta)``.
    """
    if not (0 < delta < 1) or min(n_models, N, M) < 1:
        raise ValueError("need 0 < delta < 1 and positive counts")
    L = math.log(2 * n_models * N / delta)
    return 6 * math.sqrt(L / M) + 2 * L / M


@dataclass(frozen=True)
class ConfidenceRegion:
    center: int
    radius: float
    members: tuple
    statistics: np.ndarray
    fallback: bool = False


def region_statistics(tables, center: int, data: TransitionDataset) -> np.ndarray:
    """Mean squared L1 distance to the centre over the held-out pairs, for every candidate."""
    C = np.asarray(tables[center], dtype=float)
    s, a = data.states, data.actions
    return np.array([float(np.mean(np.abs(C[s, a] - np.asarray(P)[s, a]).sum(-1) ** 2)) for P in tables])


def confidence_region(tables, center: int, data: TransitionDataset, radius: float) -> ConfidenceRegion:
    """Candidates whose statistic is within ``radius``; falls back to the centre alone if none are."""
    stats = region_statistics(tables, center, data)
    members = tuple(int(k) for k in np.flatnonzero(stats <= radius))
    if not members:
        logger.warning("confidence region is empty at radius %.4g; using the fitted model alone", radius)
        return ConfidenceRegion(center, radius, (center,), stats, fallback=True)
    return ConfidenceRegion(center, radius, members, stats)


@dataclass
class OdpcResult:
    cover: PolicyCover
    records: list
    regions: list = field(default_factory=list)
    v_star: float = math.nan

    @property
    def always_feasible(self) -> bool:
        return all(r.feasible for r in self.records)


def run_odpc(env, M: int, N: int, radius: float | None = None, delta: float = 0.1,
             policies=None, seed: int = 0, check_optimism: bool = True) -> OdpcResult:
    """Optimism-driven loop over a finite candidate class.

    ``env`` is a ``TabularLinmdp``-like object with ``env.env.mdp`` (the true
    tabular MDP), ``candidates`` (tables or a ``LinearMdpModel``) and
    ``truth_index``. Each iteration draws two independent size-``M`` datasets
    from the cover mixture, fits by exact MLE on the first, builds the
    region from the second, and adds the joint optimistic policy to the cover.
    ``radius=None`` uses :func:`feasibility_radius`.
    """
    mdp = env.env.mdp
    if not isinstance(mdp, TabularMdp):
        raise UnsupportedModelError("the optimistic loop needs a tabular environment")
    cands = env.candidates
    tables = cands.tables if hasattr(cands, "tables") else [np.asarray(t, float) for t in cands]
    truth = env.truth_index
    if radius is None:
        radius = feasibility_radius(len(tables), N, M, delta)
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    v_star = tabular_plan(mdp.P, mdp.R, H, mdp.initial_state).value

    cover = PolicyCover()
    cover.add(TabularPolicy.uniform(H, S, A))
    records, regions = [], []
    for n in range(1, N + 1):
        d1 = mixture_transitions(cover, mdp, M, stream(seed, "odpc", n, "fit"))
        d2 = mixture_transitions(cover, mdp, M, stream(seed, "odpc", n, "region"))
        fit = fit_linmdp_exact(TransitionDataset(d1.states, d1.actions, d1.next_states), tables)
        region = confidence_region(tables, fit.index,
                                   TransitionDataset(d2.states, d2.actions, d2.next_states), radius)
        feasible = truth in region.members
        plan = optimistic_plan(tables, region.members, mdp.R, H, mdp.initial_state, policies)
        if check_optimism and feasible and policies is None:
            assert plan.value >= v_star - 1e-9, "optimistic value fell below the optimum"
        d_mix = np.mean([occupancy(pi, mdp) for pi in cover.policies], axis=0)
        records.append(IterationRecord(
            iter=n, model_error=exact_model_error(tables[fit.index], mdp.P, d_mix),
            bonus_min=math.nan, bonus_mean=math.nan, bonus_max=math.nan,
            plan_value_model=plan.value, value_true_mean=exact_value_tabular(plan.policy, mdp),
            value_true_se=0.0, avg_bonus_per_step=math.nan, info_gain=math.nan,
            coverage=float(np.mean(d_mix.sum(-1) > 0)), feasible=feasible))
        regions.append(region)
        cover.add(plan.policy)
        logger.info("iter %d: region %s, truth inside %s", n, region.members, feasible)
    return OdpcResult(cover, records, regions, v_star)


# ---------------------------------------------------------------------------
# distributional eluder dimension
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EluderInstance:
    """Finite model class and policy class over a fixed tabular context.

    Distances are expected L1 gaps ``E_{d^pi} ||P(.|s,a) - P'(.|s,a)||_1``
    with ``d^pi`` the time-averaged occupancy of ``pi`` in ``mdp``.
    """

    tables: tuple
    policies: tuple
    mdp: TabularMdp
    eps: float
    _gaps: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.mdp, TabularMdp):
            raise UnsupportedModelError("eluder computations need a tabular context")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        tables = tuple(np.asarray(t, dtype=float) for t in self.tables)
        object.__setattr__(self, "tables", tables)
        object.__setattr__(self, "policies", tuple(self.policies))
        pairs = list(itertools.combinations(range(len(tables)), 2))
        gaps = np.zeros((len(self.policies), len(pairs)))
        for p, pi in enumerate(self.policies):
            d = occupancy(pi, self.mdp)
            for q, (i, j) in enumerate(pairs):
                gaps[p, q] = float(np.sum(d * np.abs(tables[i] - tables[j]).sum(-1)))
        object.__setattr__(self, "_gaps", gaps)

    @property
    def pairs(self) -> list:
        return list(itertools.combinations(range(len(self.tables)), 2))

    def gap_matrix(self) -> np.ndarray:
        """``(n_policies, n_pairs)`` expected L1 gaps."""
        return self._gaps.copy()

    def with_eps(self, eps: float) -> "EluderInstance":
        return EluderInstance(self.tables, self.policies, self.mdp, eps)


def _w(gaps: np.ndarray, sq_sums: np.ndarray, eps: float, p: int) -> float:
    admissible = np.sqrt(sq_sums) <= eps + ELUDER_TOL
    return float(gaps[p, admissible].max()) if admissible.any() else 0.0


def eluder_w_k(instance: EluderInstance, prefix, policy: int) -> float:
    """``w_k``: largest gap under ``policy`` over pairs whose prefix gaps have root-sum-square <= eps.

    ``prefix`` and ``policy`` are indices into ``instance.policies``.
    """
    gaps = instance._gaps
    if gaps.shape[1] == 0:
        return 0.0
    sq = np.zeros(gaps.shape[1])
    for p in prefix:
        sq += gaps[p] ** 2
    return _w(gaps, sq, instance.eps, policy)


class EluderResult(NamedTuple):
    dimension: int
    sequence: tuple
    capped: bool
    budget_exceeded: bool
    nodes: int


def eluder_dimension(instance: EluderInstance, max_length: int = 10, no_repeat: bool = False,
                     budget: int = 10**4) -> EluderResult:
    """Longest policy sequence with ``w_k >= eps`` at every position, by memoised depth-first search.

    Repeated policies are allowed unless ``no_repeat``. ``capped`` means a
    sequence of length ``max_length`` was found, ``budget_exceeded`` that the
    search stopped after ``budget`` nodes; either way the result is a lower bound.
    """
    gaps, eps = instance._gaps, instance.eps
    n_pol, n_pairs = gaps.shape
    if n_pairs == 0 or n_pol == 0:
        return EluderResult(0, (), False, False, 0)
    memo: dict = {}
    nodes = 0
    exceeded = False

    def search(counts: tuple, depth: int) -> tuple:
        nonlocal nodes, exceeded
        if depth >= max_length:
            return ()
        if counts in memo:
            return memo[counts]
        sq = np.asarray(counts, dtype=float) @ gaps**2
        best = ()
        for p in range(n_pol):
            if no_repeat and counts[p]:
                continue
            if nodes >= budget:
                exceeded = True
                break
            nodes += 1
            if _w(gaps, sq, eps, p) + ELUDER_TOL < eps:
                continue
            nxt = list(counts)
            nxt[p] += 1
            tail = search(tuple(nxt), depth + 1)
            if 1 + len(tail) > len(best):
                best = (p,) + tail
            if depth + len(best) >= max_length:
                break
        if not exceeded:
            memo[counts] = best
        return best

    seq = search((0,) * n_pol, 0)
    return EluderResult(len(seq), seq, len(seq) >= max_length, exceeded, nodes)


# ---------------------------------------------------------------------------
# hand-built instances
# ---------------------------------------------------------------------------

def _two_state_context(n_actions: int = 2, horizon: int = 1) -> TabularMdp:
    P = np.zeros((2, n_actions, 2))
    P[..., 0] = 1.0
    return TabularMdp(P, np.zeros((2, n_actions)), horizon, 0)


def _constant_action_policies(mdp: TabularMdp) -> tuple:
    H, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    return tuple(TabularPolicy.from_actions(np.full((H, S), a), A) for a in range(A))


def eluder_instance(name: str, eps: float | None = None) -> EluderInstance:
    """Small instances with known eluder dimension.

    ``singleton``: one model, dimension 0. ``separated_pair``: two models that
    differ only after action 1, so only one policy ever separates them and
    the dimension is 1 for ``eps`` below the gap 0.4. ``constant_gap``: two
    models at L1 gap 0.3 under every policy; dimension 1 at ``eps=0.25`` and 2
    at ``eps=0.3``.
    """
    mdp = _two_state_context()
    pols = _constant_action_policies(mdp)
    base = mdp.P
    if name == "singleton":
        return EluderInstance((base,), pols, mdp, 0.1 if eps is None else eps)
    if name == "separated_pair":
        other = base.copy()
        other[:, 1] = [0.8, 0.2]
        return EluderInstance((base, other), pols, mdp, 0.3 if eps is None else eps)
    if name == "constant_gap":
        other = base.copy()
        other[:, :] = [0.85, 0.15]
        return EluderInstance((base, other), pols, mdp, 0.3 if eps is None else eps)
    raise KeyError(f"unknown eluder instance {name!r}; choose from {ELUDER_INSTANCES}")


ELUDER_INSTANCES = ("singleton", "separated_pair", "constant_gap")
