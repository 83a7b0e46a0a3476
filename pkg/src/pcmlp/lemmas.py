"""Numerical checks of the analysis lemmas on small random instances.

Every check returns a :class:`CheckResult`; the defaults are the sizes used
by the acceptance suite and by ``pcmlp lemmas``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .algorithm import schedule_c
from .bonus import (BonusSpec, TelescopeViolation, aggregate, bonus_sandwich_check, covariance,
                    sample_transitions, sandwich_sample_size, trace_telescope_check)
from .core import TabularMdp, TabularPolicy, occupancy, simulation_gap, stream
from .envs import make_tabular_linmdp
from .mle import KnrDataset, SgdConfig, TransitionDataset, exact_model_error, fit_linmdp_exact, sgd_weights
from .odpc import eluder_dimension, eluder_instance, run_odpc
from .planners import MppiConfig, mppi_step, tabular_plan


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn: Callable) -> Callable:
    def run(*args, **kw) -> CheckResult:
        t = time.perf_counter()
        res = fn(*args, **kw)
        return res._replace(seconds=time.perf_counter() - t)

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def _random_table(rng, S, A) -> np.ndarray:
    return rng.dirichlet(np.ones(S), size=(S, A))


# ---------------------------------------------------------------------------
# analysis identities
# ---------------------------------------------------------------------------

@_timed
def check_simulation_lemma(n: int = 100, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    """Value difference equals the summed one-step model gaps, on random tabular instances."""
    worst = 0.0
    for i in range(n):
        rng = stream(seed, "simulation", i)
        S, A, H = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        truth = TabularMdp(_random_table(rng, S, A), rng.uniform(size=(S, A)), H, int(rng.integers(S)))
        model = TabularMdp(_random_table(rng, S, A), rng.uniform(size=(S, A)), H, truth.initial_state)
        pi = TabularPolicy(rng.dirichlet(np.ones(A), size=(H, S)))
        gap = simulation_gap(pi, truth, model)
        worst = max(worst, abs(gap.lhs - gap.rhs))
    return CheckResult("simulation lemma", worst <= tol, f"max |lhs - rhs| = {worst:.2e} over {n} instances")


def random_psd_sequence(rng, d: int, N: int, cap: float) -> list:
    """``N`` random PSD matrices with largest eigenvalue at most ``cap``."""
    out = []
    for _ in range(N):
        G = rng.standard_normal((d, int(rng.integers(1, d + 1))))
        S = G @ G.T
        out.append(S * (rng.uniform() * cap / max(np.linalg.eigvalsh(S).max(), 1e-300)))
    return out


@_timed
def check_trace_telescope(n: int = 100, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    """``2 ln det`` growth bounds the summed normalised traces on random PSD sequences."""
    worst = math.inf
    for i in range(n):
        rng = stream(seed, "telescope", i)
        d, N = int(rng.integers(1, 9)), int(rng.integers(1, 21))
        lam = float(10 ** rng.uniform(-2, 1))
        seq = random_psd_sequence(rng, d, N, min(1.0, lam))
        try:
            lhs, rhs = trace_telescope_check(seq, lam)
        except TelescopeViolation as err:
            return CheckResult("trace telescoping", False, f"instance {i}: {err}")
        worst = min(worst, lhs - rhs)
    return CheckResult("trace telescoping", worst >= -tol, f"min slack = {worst:.3g} over {n} sequences")


@_timed
def check_covariance_sandwich(n_seeds: int = 100, N: int = 5, d: int = 4, lam: float = 1.0,
                              delta: float = 0.05, n_probes: int = 100, n_atoms: int = 20,
                              need: int = 95, seed: int = 0) -> CheckResult:
    """Empirical covariance sums give quadratic forms within a factor 2 of the exact ones."""
    K = sandwich_sample_size(N, d, lam, delta)
    good, bonus_ok = 0, 0
    for i in range(n_seeds):
        rng = stream(seed, "sandwich", i)
        true_covs, emp_covs = [], []
        for _ in range(N):
            atoms = rng.standard_normal((n_atoms, d))
            atoms *= (rng.uniform(size=(n_atoms, 1)) ** (1 / d)) / np.linalg.norm(atoms, axis=1, keepdims=True)
            p = rng.dirichlet(np.ones(n_atoms))
            true_covs.append(np.einsum("k,ki,kj->ij", p, atoms, atoms))
            emp_covs.append(covariance(atoms[rng.choice(n_atoms, size=K, p=p)]))
        probes = rng.standard_normal((n_probes, d))
        probes /= np.maximum(1.0, np.linalg.norm(probes, axis=1, keepdims=True))
        report = bonus_sandwich_check(true_covs, emp_covs, probes, lam)
        good += report.quad_ok
        bonus_ok += report.quad_ok and report.bonus_ok
    ok = good >= need and bonus_ok == good
    return CheckResult("covariance sandwich", ok,
                       f"factor-2 sandwich in {good}/{n_seeds} seeds (K={K}), bonus ratio in [1, 4] in {bonus_ok}")


# ---------------------------------------------------------------------------
# model fitting
# ---------------------------------------------------------------------------

def sgd_risk(M: int, seed: int, d: int = 4, d_s: int = 2, sigma: float = 0.1, F: float = 1.0) -> float:
    """Excess risk ``E ||(W_hat - W*) phi||^2`` for phi uniform on the unit sphere (= ``||.||_F^2 / d``)."""
    rng = stream(seed, "sgd", M)
    W = rng.standard_normal((d_s, d))
    W *= F * rng.uniform(0.5, 1.0) / np.linalg.norm(W)
    phi = rng.standard_normal((M, d))
    phi /= np.linalg.norm(phi, axis=1, keepdims=True)
    targets = phi @ W.T + sigma * rng.standard_normal((M, d_s))
    cfg = SgdConfig.from_noise(F, sigma, d_s, M)
    W_hat = sgd_weights(KnrDataset(phi, targets), cfg)
    return float(np.linalg.norm(W_hat - W) ** 2 / d)


@_timed
def check_sgd_rate(n_seeds: int = 20, small: int = 100, large: int = 10_000, factor: float = 3.0,
                   seed: int = 0) -> CheckResult:
    """Averaged projected SGD: risk at ``large`` samples is ``factor`` times below ``small``."""
    r_small = np.mean([sgd_risk(small, seed + i) for i in range(n_seeds)])
    r_large = np.mean([sgd_risk(large, seed + i) for i in range(n_seeds)])
    ratio = r_small / r_large
    return CheckResult("SGD risk decay", ratio >= factor,
                       f"risk {r_small:.4g} at M={small}, {r_large:.4g} at M={large}, ratio {ratio:.2f}")


@_timed
def check_mle_identification(n_seeds: int = 100, M: int = 500, need: int = 95, seed: int = 0) -> CheckResult:
    """Exact MLE over four TV-separated candidates recovers the truth."""
    hits = 0
    for i in range(n_seeds):
        inst = make_tabular_linmdp(n_states=4, n_actions=2, n_candidates=4, seed=seed + i, gap=0.2)
        mdp = inst.env.mdp
        pi = TabularPolicy.uniform(mdp.horizon, mdp.n_states, mdp.n_actions)
        b = sample_transitions(pi, mdp, M, stream(seed, "mle-id", i))
        fit = fit_linmdp_exact(TransitionDataset(b.states, b.actions, b.next_states), inst.candidates)
        hits += fit.index == inst.truth_index
    return CheckResult("MLE identification", hits >= need, f"truth selected in {hits}/{n_seeds} seeds")


# ---------------------------------------------------------------------------
# optimism and feasibility
# ---------------------------------------------------------------------------

def optimism_gap(seed: int, M: int = 500, K: int = 2000, lam: float = 1.0) -> float:
    """Planned value under ``(P_hat, r + b_hat)`` minus the true optimum, after one round of data."""
    inst = make_tabular_linmdp(n_states=4, n_actions=2, n_candidates=4, seed=seed, gap=0.2, horizon=3)
    env, mdp = inst.env, inst.env.mdp
    H = mdp.horizon
    pi = TabularPolicy.uniform(H, mdp.n_states, mdp.n_actions)
    data = sample_transitions(pi, mdp, M, stream(seed, "optimism", "mle"))
    fit = fit_linmdp_exact(TransitionDataset(data.states, data.actions, data.next_states), inst.candidates)
    P_hat = inst.candidates.transition_table(fit.index)
    eps = exact_model_error(P_hat, mdp.P, occupancy(pi, mdp))
    cov_batch = sample_transitions(pi, mdp, K, stream(seed, "optimism", "cov"))
    Sigma = covariance(env.feature.batch(cov_batch.states, cov_batch.actions))
    d = env.feature.d
    c = schedule_c("linmdp", H, d=d, lam=lam, N=1, eps_stat=eps)
    spec = BonusSpec(c, H, lam, aggregate([Sigma], lam, d))
    b = spec(env.feature.matrix().reshape(-1, d)).reshape(mdp.R.shape)
    planned = tabular_plan(P_hat, mdp.R + b, H, mdp.initial_state).value
    v_star = tabular_plan(mdp.P, mdp.R, H, mdp.initial_state).value
    return planned - v_star


@_timed
def check_optimism(n_seeds: int = 100, need: int = 95, seed: int = 0) -> CheckResult:
    """Bonus-augmented planning in the fitted model over-estimates the optimum."""
    gaps = np.array([optimism_gap(seed + i) for i in range(n_seeds)])
    hits = int(np.sum(gaps >= -1e-12))
    return CheckResult("optimism", hits >= need, f"optimistic in {hits}/{n_seeds} seeds, min gap {gaps.min():.3g}")


@_timed
def check_feasibility(n_seeds: int = 200, M: int = 500, N: int = 5, delta: float = 0.1,
                      slack: float = 0.05, seed: int = 0) -> CheckResult:
    """The truth stays inside every confidence region at the derived radius."""
    kept = 0
    for i in range(n_seeds):
        inst = make_tabular_linmdp(n_states=4, n_actions=2, n_candidates=4, seed=seed + i)
        kept += run_odpc(inst, M=M, N=N, delta=delta, seed=seed + i).always_feasible
    rate = kept / n_seeds
    return CheckResult("feasibility of the truth", rate >= 1 - delta - slack,
                       f"truth kept in all regions in {kept}/{n_seeds} seeds ({rate:.3f})")


@_timed
def check_eluder() -> CheckResult:
    """Brute-force eluder dimension on hand-built instances."""
    expected = {("singleton", None): 0, ("separated_pair", None): 1,
                ("constant_gap", 0.25): 1, ("constant_gap", 0.3): 2}
    got = {k: eluder_dimension(eluder_instance(*k)).dimension for k in expected}
    ok = got == expected
    return CheckResult("eluder dimension", ok, ", ".join(f"{n}@{e}: {v}" for (n, e), v in got.items()))


# ---------------------------------------------------------------------------
# MPPI on a double integrator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoubleIntegrator:
    """``x' = x + dt v``, ``v' = v + dt a`` with cost ``q_x x^2 + q_v v^2 + r a^2`` per step."""

    dt: float = 0.2
    q_x: float = 1.0
    q_v: float = 0.1
    r: float = 0.01
    a_max: float = 1.0
    horizon: int = 25
    s0: tuple = (1.0, 0.0)

    def step(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        S = np.atleast_2d(S)
        a = np.clip(np.asarray(A, dtype=float).reshape(len(S)), -self.a_max, self.a_max)
        return np.stack([S[:, 0] + self.dt * S[:, 1], S[:, 1] + self.dt * a], axis=1)

    def cost(self, S: np.ndarray, A: np.ndarray) -> np.ndarray:
        S = np.atleast_2d(S)
        a = np.asarray(A, dtype=float).reshape(len(S))
        return self.q_x * S[:, 0] ** 2 + self.q_v * S[:, 1] ** 2 + self.r * a**2

    def lqr_cost(self) -> float:
        """Unconstrained finite-horizon optimum by the Riccati recursion."""
        Am = np.array([[1.0, self.dt], [0.0, 1.0]])
        Bm = np.array([[0.0], [self.dt]])
        Q, R = np.diag([self.q_x, self.q_v]), np.array([[self.r]])
        P = np.zeros((2, 2))
        for _ in range(self.horizon):
            K = np.linalg.solve(R + Bm.T @ P @ Bm, Bm.T @ P @ Am)
            P = Q + Am.T @ P @ (Am - Bm @ K)
        s = np.asarray(self.s0, dtype=float)
        return float(s @ P @ s)


def grid_dp_cost(sys: DoubleIntegrator, n_x: int = 121, n_v: int = 121, n_a: int = 41,
                 x_lim: float = 1.5, v_lim: float = 2.0) -> float:
    """Finite-horizon optimum by value iteration on a state grid with bilinear interpolation."""
    xs, vs = np.linspace(-x_lim, x_lim, n_x), np.linspace(-v_lim, v_lim, n_v)
    acts = np.linspace(-sys.a_max, sys.a_max, n_a)
    X, V = np.meshgrid(xs, vs, indexing="ij")
    S = np.stack([X.ravel(), V.ravel()], axis=1)
    SA = np.repeat(S, n_a, axis=0)
    AA = np.tile(acts, len(S))
    nxt = sys.step(SA, AA)
    nxt[:, 0] = np.clip(nxt[:, 0], -x_lim, x_lim)
    nxt[:, 1] = np.clip(nxt[:, 1], -v_lim, v_lim)
    stage = sys.cost(SA, AA)
    J = np.zeros((n_x, n_v))
    for _ in range(sys.horizon):
        future = RegularGridInterpolator((xs, vs), J)(nxt)
        J = (stage + future).reshape(len(S), n_a).min(axis=1).reshape(n_x, n_v)
    return float(RegularGridInterpolator((xs, vs), J)(np.atleast_2d(sys.s0))[0])


def mppi_episode(sys: DoubleIntegrator, cfg: MppiConfig, seed: int = 0):
    """Receding-horizon MPPI on the exact model; returns (episode cost, per-step weight sums)."""
    rng = stream(seed, "mppi-sanity")
    s = np.asarray(sys.s0, dtype=float)
    nominal = np.zeros((cfg.T, 1))
    total, sums = 0.0, []

    def reward(S, A):
        return -sys.cost(S, A)

    for h in range(sys.horizon):
        T = min(cfg.T, sys.horizon - h)
        out = mppi_step(cfg, nominal[:T], sys.step, reward, s, rng)
        sums.append(float(out.weights.sum()))
        nominal = np.zeros_like(nominal)
        nominal[:T] = out.nominal
        total += float(sys.cost(s, out.action)[0])
        s = sys.step(s, out.action)[0]
    return total, np.array(sums)


def argmin_concentration(seed: int = 0, lam: float = 1e-6) -> float:
    """``1 - w[argmin cost]`` for one MPPI update at a tiny temperature."""
    sys = DoubleIntegrator()
    cfg = MppiConfig(lam=lam, action_dim=1, action_low=-sys.a_max, action_high=sys.a_max)
    out = mppi_step(cfg, np.zeros((cfg.T, 1)), sys.step, lambda S, A: -sys.cost(S, A),
                    np.asarray(sys.s0), stream(seed, "argmin"))
    return float(1.0 - out.weights[np.argmin(out.costs)])


# the toy's cost scale is small, so it runs colder and wider than the planner defaults
TOY_MPPI = dict(K=1000, lam=0.03, sigma=0.5)


@_timed
def check_mppi(seed: int = 0, tol: float = 0.10) -> CheckResult:
    """Weights normalise, concentrate at low temperature, and the episode cost is near the DP optimum."""
    sys = DoubleIntegrator()
    cfg = MppiConfig(action_dim=1, action_low=-sys.a_max, action_high=sys.a_max, **TOY_MPPI)
    cost, sums = mppi_episode(sys, cfg, seed)
    norm_err = float(np.max(np.abs(sums - 1.0)))
    conc = argmin_concentration(seed)
    opt = grid_dp_cost(sys)
    ok = norm_err <= 1e-12 and conc <= 1e-3 and cost <= (1 + tol) * opt
    return CheckResult("MPPI sanity", ok,
                       f"weight-sum error {norm_err:.1e}, argmin gap {conc:.1e}, "
                       f"episode cost {cost:.4f} vs grid optimum {opt:.4f} (LQR {sys.lqr_cost():.4f})")


ALL_CHECKS = {
    "simulation": check_simulation_lemma,
    "telescope": check_trace_telescope,
    "sandwich": check_covariance_sandwich,
    "sgd": check_sgd_rate,
    "mle": check_mle_identification,
    "optimism": check_optimism,
    "feasibility": check_feasibility,
    "eluder": check_eluder,
    "mppi": check_mppi,
}


def run_all(names=None) -> list:
    return [ALL_CHECKS[n]() for n in (names or ALL_CHECKS)]
