"""Policy-cover guided model learning and planning (the PC-MLP loop)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .bonus import (Batch, BonusSpec, PolicyCover, aggregate, concat_batches, covariance,
                    information_gain, mixture_transitions, sample_transitions)
from .core import (MdpSpec, TabularMdp, exact_value_tabular, occupancy, occupancy_by_step,
                   parallel_map, rollout, stream)
from .envs import Environment, coverage_of_states
from .mle import (KnrDataset, SgdConfig, TransitionDataset, exact_model_error, fit_knr_least_squares,
                  fit_knr_sgd, fit_linmdp_exact)
from .models import KnrModel
from .planners import MppiConfig, MppiPolicy, tabular_plan

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# bonus-scale schedules
# ---------------------------------------------------------------------------

def schedule_c(family: str, H: float, d: int | None = None, d_s: int | None = None,
               F: float | None = None, sigma: float | None = None, lam: float = 1.0,
               N: int = 1, eps_stat: float = 0.0) -> float:
    """Bonus scale that makes the bonus optimistic.

    linear MDP: ``H sqrt(lam d + N eps_stat)``;
    KNR: ``(H / sigma) sqrt(4 lam F^2 + N eps_stat)``.
    """
    if family == "linmdp":
        return H * math.sqrt(lam * d + N * eps_stat)
    if family == "knr":
        return H / sigma * math.sqrt(4 * lam * F**2 + N * eps_stat)
    raise ValueError(f"unknown model family {family!r}")


class TheoryPreset(NamedTuple):
    N: int
    M: int
    c: float
    K: int


def theory_preset_linmdp(eps: float, delta: float, H: int, d: int, n_models: int) -> TheoryPreset:
    """Worst-case hyperparameters for finite linear-MDP classes (with ``lam = 1``)."""
    x = 40 * H**6 * d**2 / eps**2
    N = math.ceil(2 * x * math.log(x))
    M = math.ceil(2 * N * math.log(n_models * N / delta))
    K = math.ceil(32 * N**2 * math.log(8 * N * d / delta))
    return TheoryPreset(N, M, H * math.sqrt(d + 1), K)


def theory_preset_knr(eps: float, delta: float, H: int, d: int, d_s: int, F: float,
                      sigma: float) -> TheoryPreset:
    """Worst-case hyperparameters for KNRs."""
    x = 6400 * H**6 * F**2 * d_s * d / (sigma**2 * eps**2)
    N = math.ceil(2 * x * math.log(x))
    a = (8 * F**4 + 9 * sigma**2 * F**2 * d_s * math.log(2 * d_s * N / delta)) * math.log(N / delta) ** 2 * N**2
    b = 18 * sigma**2 * F**2 * d_s
    M = math.ceil(a + b * math.log(a + b))
    K = math.ceil(32 * N**2 * math.log(8 * N * d / delta))
    return TheoryPreset(N, M, 8 * H / sigma * math.sqrt(F**2 * d_s), K)


# ---------------------------------------------------------------------------
# configuration and records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcmlpConfig:
    """Loop settings.

    ``bonus_scale`` multiplies the scale schedule: ``"constant"`` (1) or
    ``"theory"`` (:func:`schedule_c` with the measured or supplied
    ``eps_stat``). ``sample_mode`` picks occupancy sampling (``"iid"`` random
    truncation, or ``"trajectory"`` full episodes). ``data_mode="replay"``
    fits the model on every covariance sample gathered so far instead of a
    fresh mixture draw of size ``M``.
    """

    N: int = 15
    K: int = 300
    M: int = 300
    lam: float = 0.01
    bonus_scale: float = 1.0
    c_schedule: str = "constant"
    eps_stat: float | None = None
    bonus_form: str = "main"
    fitter: str = "auto"
    projection: str = "frobenius"
    sgd_delta: float = 0.01
    sample_mode: str = "iid"
    data_mode: str = "fresh"
    reward_free: bool = False
    eval_rollouts: int = 5
    model_rollouts: int = 1
    n_probes: int = 256
    check_shrinkage: bool = True
    seed: int = 0
    mppi: MppiConfig = field(default_factory=MppiConfig)

    def __post_init__(self):
        for name in ("N", "K", "M", "eval_rollouts", "n_probes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.bonus_scale < 0:
            raise ValueError("bonus_scale must be non-negative")
        choices = dict(c_schedule=("constant", "theory"), fitter=("auto", "sgd", "least_squares", "exact"),
                       sample_mode=("iid", "trajectory"), data_mode=("fresh", "replay"),
                       bonus_form=("main", "proof"), projection=("frobenius", "spectral"))
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")


@dataclass
class IterationRecord:
    iter: int
    model_error: float
    bonus_min: float
    bonus_mean: float
    bonus_max: float
    plan_value_model: float
    value_true_mean: float
    value_true_se: float
    avg_bonus_per_step: float
    info_gain: float
    coverage: float
    feasible: bool | None = None
    c: float = 0.0
    eps_stat: float = 0.0
    goal_reached: bool = False


@dataclass
class PcmlpResult:
    cover: PolicyCover
    records: list
    models: list
    best_iter: int
    best_value: float
    goal_iter: int | None = None

    @property
    def goal_reached(self) -> bool:
        return self.goal_iter is not None


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

def _fitter(cfg: PcmlpConfig, env: Environment) -> str:
    if cfg.fitter != "auto":
        return cfg.fitter
    return "exact" if env.family == "linmdp" else "sgd"


def _goal_hits(env: Environment, states) -> bool:
    if env.goal is None or not len(states):
        return False
    return any(env.goal(s) for s in states)


def _fit_knr(cfg: PcmlpConfig, env: Environment, batch: Batch) -> KnrModel:
    data = KnrDataset.from_transitions(env.feature, batch.states, batch.actions, batch.next_states,
                                       env.residual)
    d_s = data.targets.shape[1]
    if _fitter(cfg, env) == "least_squares":
        return fit_knr_least_squares(data, env.knr_F, env.knr_sigma, env.feature, env.residual)
    sgd = SgdConfig.from_noise(env.knr_F, env.knr_sigma, d_s, len(data), cfg.sgd_delta,
                               projection=cfg.projection)
    return fit_knr_sgd(data, sgd, env.knr_sigma, env.feature, env.residual)


def _knr_errors(model: KnrModel, env: Environment, batch: Batch) -> np.ndarray:
    """Per-sample ``||mean_model - mean_truth||`` (or observed next state when no truth)."""
    pred = model.mean_next(batch.states, batch.actions)
    if isinstance(env.truth, KnrModel):
        target = env.truth.mean_next(batch.states, batch.actions)
    else:
        target = np.atleast_2d(batch.next_states)
    return np.linalg.norm(pred - target, axis=1)


def run_pcmlp(cfg: PcmlpConfig, env: Environment) -> PcmlpResult:
    """Run ``cfg.N`` iterations; the cover ends with ``N + 1`` policies."""
    tabular = isinstance(env.mdp, TabularMdp)
    fitter = _fitter(cfg, env)
    if tabular and fitter != "exact":
        raise ValueError("tabular environments are fitted by exact MLE")
    if not tabular and fitter == "exact":
        raise ValueError("exact MLE needs a finite candidate class")
    mdp, H, seed = env.mdp, env.horizon, cfg.seed
    d = env.feature.d
    family = "linmdp" if env.family == "linmdp" else "knr"
    base_reward = (lambda S, A: np.zeros(len(np.atleast_2d(S)))) if cfg.reward_free else env.reward_batch

    probe_batch = sample_transitions(env.uniform_policy(), mdp, cfg.n_probes, stream(seed, "probes"), "iid")
    probes = env.feature.batch(probe_batch.states, probe_batch.actions)

    mppi = None
    if not tabular:
        mppi = replace(cfg.mppi, action_dim=env.action_dim,
                       action_low=cfg.mppi.action_low if cfg.mppi.action_low is not None else env.action_low,
                       action_high=cfg.mppi.action_high if cfg.mppi.action_high is not None else env.action_high)

    cover = PolicyCover()
    cover.add(env.uniform_policy())
    records, models, batches = [], [], []
    visited = []
    prev_probe_bonus, prev_c = None, None
    goal_iter = None

    for n in range(1, cfg.N + 1):
        # covariance of the newest policy
        batch = sample_transitions(cover.policies[n - 1], mdp, cfg.K, stream(seed, "cov", n), cfg.sample_mode)
        cover.set_cov(n - 1, covariance(env.feature.batch(batch.states, batch.actions)))
        batches.append(batch)
        sigma_hat = aggregate(cover, cfg.lam)

        # model fit on cover data
        if cfg.data_mode == "replay":
            data = concat_batches(batches)
        else:
            data = mixture_transitions(cover, mdp, cfg.M, stream(seed, "mle", n), cfg.sample_mode)
        new_states = [batch.states, batch.next_states] + ([] if cfg.data_mode == "replay"
                                                         else [data.states, data.next_states])

        if tabular:
            fit = fit_linmdp_exact(TransitionDataset(data.states, data.actions, data.next_states), env.truth)
            P_hat = env.truth.transition_table(fit.index)
            model = fit.index
            d_mix = np.mean([occupancy(pi, mdp) for pi in cover.policies], axis=0)
            eps = exact_model_error(P_hat, mdp.P, d_mix)
            d_new = occupancy(cover.policies[n - 1], mdp)
            model_error = exact_model_error(P_hat, mdp.P, d_new)
        else:
            model = _fit_knr(cfg, env, data)
            model_error = float(np.mean(_knr_errors(model, env, batch)))
            eps = float(np.mean(_knr_errors(model, env, data) ** 2))
        models.append(model)
        eps_stat = cfg.eps_stat if cfg.eps_stat is not None else eps

        if cfg.c_schedule == "constant":
            c = cfg.bonus_scale
        else:
            c = cfg.bonus_scale * schedule_c(family, H, d=d, d_s=getattr(mdp, "state_dim", None),
                                             F=env.knr_F, sigma=env.knr_sigma, lam=cfg.lam,
                                             N=cfg.N, eps_stat=eps_stat)
        spec = BonusSpec(c, H, cfg.lam, sigma_hat, cfg.bonus_form)
        probe_bonus = spec(probes)
        if c == 0:
            assert np.all(probe_bonus == 0), "bonus must vanish when c = 0"
        if cfg.check_shrinkage and prev_probe_bonus is not None and c == prev_c:
            worst = float(np.max(probe_bonus - prev_probe_bonus))
            assert worst <= 1e-9 * (1 + H), f"iteration {n}: probe bonus grew by {worst:.3g}"
        prev_probe_bonus, prev_c = probe_bonus, c

        # plan in the fitted model with reward r + bonus
        if tabular:
            b_table = spec(env.feature.matrix().reshape(-1, d)).reshape(mdp.R.shape)
            R_plan = (0.0 if cfg.reward_free else mdp.R) + b_table
            plan = tabular_plan(P_hat, R_plan, H, mdp.initial_state)
            policy, plan_value = plan.policy, plan.value
            value_mean, value_se = exact_value_tabular(policy, mdp), 0.0
            d_h = occupancy_by_step(policy, mdp)
            avg_bonus = float(np.sum(d_h * b_table) / H)
            eval_states = []
        else:
            feature = env.feature

            def plan_reward(S, A, spec=spec):
                r = base_reward(S, A)
                return r + spec(feature.batch(S, A)) if spec.c > 0 else r

            def plan_step(S, A, spec=spec, W=model.W.T, residual=model.residual):
                phi = feature.batch(S, A)
                r = base_reward(S, A)
                if spec.c > 0:
                    r = r + spec(phi)
                nxt = phi @ W
                return r, (S + nxt if residual else nxt)

            policy = MppiPolicy(mppi, model, plan_reward, H, plan_step)
            plan_value = math.nan
            if cfg.model_rollouts > 0:
                sim = MdpSpec(H, mdp.initial_state, lambda s, a: 0.0,
                              lambda s, a, g, m=model: m.mean_next(np.asarray(s)[None], np.asarray(a)[None])[0])

                def model_return(g):
                    traj = rollout(policy, sim, g)
                    return float(np.sum(plan_reward(np.array(traj.states), np.array(traj.actions))))

                plan_value = float(np.mean(parallel_map(model_return,
                                                        stream(seed, "model_value", n).spawn(cfg.model_rollouts))))
            trajs = parallel_map(lambda g: rollout(policy, mdp, g), stream(seed, "eval", n).spawn(cfg.eval_rollouts))
            returns = np.array([t.total_reward for t in trajs])
            value_mean = float(returns.mean())
            value_se = float(returns.std(ddof=1) / math.sqrt(len(returns))) if len(returns) > 1 else 0.0
            S_eval = np.array([s for t in trajs for s in t.states])
            A_eval = np.array([a for t in trajs for a in t.actions])
            avg_bonus = float(np.mean(spec(feature.batch(S_eval, A_eval))))
            eval_states = [S_eval, np.array([t.steps[-1].next_state for t in trajs])]

        visited.extend(new_states + eval_states)
        all_states = np.concatenate([np.atleast_1d(np.asarray(v)) if tabular else np.atleast_2d(v)
                                     for v in visited])
        coverage = coverage_of_states(all_states, env.grid) if env.grid is not None else math.nan
        if goal_iter is None and _goal_hits(env, np.concatenate([np.atleast_2d(v) for v in new_states + eval_states])
                                            if not tabular else []):
            goal_iter = n

        cover.add(policy)
        records.append(IterationRecord(
            iter=n, model_error=float(model_error), bonus_min=float(probe_bonus.min()),
            bonus_mean=float(probe_bonus.mean()), bonus_max=float(probe_bonus.max()),
            plan_value_model=float(plan_value), value_true_mean=value_mean, value_true_se=value_se,
            avg_bonus_per_step=avg_bonus, info_gain=information_gain(cover.covs, cfg.lam),
            coverage=float(coverage), c=float(c), eps_stat=float(eps_stat),
            goal_reached=goal_iter is not None))
        logger.info("iter %d: value %.4g, avg bonus %.4g, model error %.4g", n, value_mean, avg_bonus, model_error)

    values = [r.value_true_mean for r in records]
    best = int(np.argmax(values))
    return PcmlpResult(cover, records, models, best + 1, float(values[best]), goal_iter)


# ---------------------------------------------------------------------------
# regret diagnostic
# ---------------------------------------------------------------------------

class RegretSummary(NamedTuple):
    cumulative_regret: np.ndarray
    cumulative_bonus: np.ndarray
    bound: np.ndarray

    @property
    def holds(self) -> bool:
        return bool(np.all(self.cumulative_regret <= self.bound + 1e-12))


def regret_diagnostic(values, v_star: float, bonus_expectations, H: int) -> RegretSummary:
    """Cumulative regret ``sum (V* - J(pi_n))`` next to ``6 H^2 sum E[b_n] + H``."""
    regret = np.cumsum(v_star - np.asarray(values, dtype=float))
    bonus = np.cumsum(np.asarray(bonus_expectations, dtype=float))
    return RegretSummary(regret, bonus, 6 * H**2 * bonus + H)


def regret_from_records(records, v_star: float, H: int) -> RegretSummary:
    """Regret series from loop records.

    Record ``n`` holds ``J(pi_{n+1})`` and ``E_{d^{pi_{n+1}}} b_n`` (the time-averaged
    bonus along ``pi_{n+1}``), which are the paired terms of the bound.
    """
    return regret_diagnostic([r.value_true_mean for r in records], v_star,
                             [r.avg_bonus_per_step for r in records], H)


__all__ = ["PcmlpConfig", "PcmlpResult", "IterationRecord", "run_pcmlp", "schedule_c",
           "theory_preset_linmdp", "theory_preset_knr", "regret_diagnostic", "regret_from_records",
           "RegretSummary", "TheoryPreset"]
