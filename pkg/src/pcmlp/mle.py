"""Maximum-likelihood model fitting from policy-cover data."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .features import FeatureMap
from .models import KnrModel, LinearMdpModel, TabularModel, state_norm_bound, transition_table


@dataclass(frozen=True)
class KnrDataset:
    """Regression pairs ``(phi_i, target_i)`` in the order they were drawn."""

    phi: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        targets = np.asarray(self.targets, dtype=float).reshape(len(phi), -1)
        if len(phi) == 0:
            raise ValueError("dataset is empty")
        if np.any(np.linalg.norm(phi, axis=1) > 1 + 1e-9):
            raise ValueError("feature vectors must have norm <= 1")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return len(self.phi)

    @classmethod
    def from_transitions(cls, feature: FeatureMap, S, A, S_next, residual: bool = False) -> "KnrDataset":
        S = np.atleast_2d(np.asarray(S, dtype=float))
        S_next = np.atleast_2d(np.asarray(S_next, dtype=float))
        return cls(feature.batch(S, A), S_next - S if residual else S_next)


@dataclass(frozen=True)
class TransitionDataset:
    """Tabular transitions as index arrays."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        for name in ("states", "actions", "next_states"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=int).ravel())
        if not len(self.states) == len(self.actions) == len(self.next_states):
            raise ValueError("index arrays must have equal length")
        if len(self.states) == 0:
            raise ValueError("dataset is empty")

    def __len__(self) -> int:
        return len(self.states)

    def counts(self, n_states: int, n_actions: int) -> np.ndarray:
        C = np.zeros((n_states, n_actions, n_states))
        np.add.at(C, (self.states, self.actions, self.next_states), 1.0)
        return C


# ---------------------------------------------------------------------------
# KNR
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgdConfig:
    """Projected SGD settings. ``eta=None`` means ``F^2 / ((F + B) sqrt(M))``."""

    F: float
    B: float
    eta: float | None = None
    projection: str = "frobenius"

    def __post_init__(self):
        if self.projection not in ("frobenius", "spectral"):
            raise ValueError(f"unknown projection {self.projection!r}")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("step size must be positive")

    @classmethod
    def from_noise(cls, F: float, sigma: float, d_s: int, M: int, delta: float = 0.01,
                   **kw) -> "SgdConfig":
        return cls(F, state_norm_bound(F, sigma, d_s, M, delta), **kw)

    def step_size(self, M: int) -> float:
        if self.eta is not None:
            return self.eta
        return self.F**2 / ((self.F + self.B) * math.sqrt(M))


def project(W: np.ndarray, F: float, kind: str = "frobenius") -> np.ndarray:
    """Euclidean projection onto ``{||W||_F <= F}`` or ``{||W||_2 <= F}``."""
    if kind == "frobenius":
        n = np.linalg.norm(W)
        return W * (F / n) if n > F else W
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    if s[0] <= F:
        return W
    return (U * np.minimum(s, F)) @ Vt


def sgd_weights(data: KnrDataset, cfg: SgdConfig) -> np.ndarray:
    """Averaged iterate of one projected-SGD pass, starting from ``W_1 = 0``.

    ``W_{i+1} = proj(W_i - eta (W_i phi_i - s'_i) phi_i^T)`` and the output is
    ``(W_1 + ... + W_M) / M``.
    """
    M = len(data)
    eta = cfg.step_size(M)
    d_s, d = data.targets.shape[1], data.phi.shape[1]
    W = np.zeros((d_s, d))
    total = np.zeros_like(W)
    for phi, y in zip(data.phi, data.targets):
        total += W
        W = project(W - eta * np.outer(W @ phi - y, phi), cfg.F, cfg.projection)
    W_hat = total / M
    bound = np.linalg.norm(W_hat) if cfg.projection == "frobenius" else np.linalg.norm(W_hat, 2)
    assert bound <= cfg.F * (1 + 1e-9), "averaged iterate left the feasible ball"
    return W_hat


def fit_knr_sgd(data: KnrDataset, cfg: SgdConfig, sigma: float,
                feature: FeatureMap | None = None, residual: bool = False) -> KnrModel:
    W = sgd_weights(data, cfg)
    if cfg.projection == "spectral":
        # spectral ball is larger than the model class's Frobenius ball
        W = project(W, cfg.F, "frobenius")
    return KnrModel(W, sigma, cfg.F, feature, residual)


def least_squares_weights(data: KnrDataset, F: float, ridge: float = 1e-6,
                          iters: int = 60) -> np.ndarray:
    """Norm-constrained least squares: ridge fit, raising the regulariser until ``||W||_F <= F``."""
    X, Y = data.phi, data.targets
    G = X.T @ X
    XtY = X.T @ Y
    evals, evecs = np.linalg.eigh(G)
    proj = evecs.T @ XtY

    def solve(reg):
        return (evecs @ (proj / (evals + reg)[:, None])).T

    W = solve(ridge)
    if np.linalg.norm(W) <= F:
        return W
    lo, hi = ridge, max(ridge, 1.0)
    while np.linalg.norm(solve(hi)) > F:
        hi *= 10
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        if np.linalg.norm(solve(mid)) > F:
            lo = mid
        else:
            hi = mid
    return project(solve(hi), F)


def fit_knr_least_squares(data: KnrDataset, F: float, sigma: float,
                          feature: FeatureMap | None = None, residual: bool = False,
                          ridge: float = 1e-6) -> KnrModel:
    return KnrModel(least_squares_weights(data, F, ridge), sigma, F, feature, residual)


# ---------------------------------------------------------------------------
# finite classes
# ---------------------------------------------------------------------------

class MleResult(NamedTuple):
    index: int
    log_likelihoods: np.ndarray
    degenerate: bool


def _tables(candidates) -> list[np.ndarray]:
    if isinstance(candidates, LinearMdpModel):
        return candidates.tables
    return [transition_table(c) for c in candidates]


def log_likelihoods(data: TransitionDataset, candidates) -> np.ndarray:
    """Total log-likelihood of the data under each candidate table."""
    tables = _tables(candidates)
    if not tables:
        raise ValueError("no candidates")
    S, A, _ = tables[0].shape
    C = data.counts(S, A)
    mask = C > 0
    out = np.empty(len(tables))
    with np.errstate(divide="ignore"):
        for k, P in enumerate(tables):
            out[k] = float(np.sum(C[mask] * np.log(P[mask])))
    return out


def fit_linmdp_exact(data: TransitionDataset, candidates) -> MleResult:
    """Exact MLE over a finite class; ties go to the lowest index.

    If every candidate gives some observed transition zero probability, index
    0 is returned with ``degenerate=True``.
    """
    ll = log_likelihoods(data, candidates)
    degenerate = bool(np.all(np.isneginf(ll)))
    return MleResult(int(np.argmax(ll)), ll, degenerate)


# ---------------------------------------------------------------------------
# generalisation error
# ---------------------------------------------------------------------------

Sampler = Callable[[int, np.random.Generator], tuple]


def measure_model_error(model, truth, sampler: Sampler, n: int, rng: np.random.Generator,
                        squared: bool = False) -> float:
    """Monte-Carlo model error under the distribution drawn by ``sampler(n, rng) -> (S, A)``.

    KNR: mean of ``||mean_model(s, a) - mean_truth(s, a)||_2`` (squared if asked).
    Tabular / linear MDP: mean of ``||P_hat(.|s, a) - P(.|s, a)||_1^2``.
    """
    S, A = sampler(n, rng)
    if isinstance(model, KnrModel) and isinstance(truth, KnrModel):
        gap = np.linalg.norm(model.mean_next(S, A) - truth.mean_next(S, A), axis=1)
        return float(np.mean(gap**2 if squared else gap))
    tabular = (LinearMdpModel, TabularModel, np.ndarray)
    if isinstance(model, tabular) and isinstance(truth, tabular):
        diff = transition_table(model) - transition_table(truth)
        l1 = np.abs(diff[np.asarray(S, int), np.asarray(A, int)]).sum(-1)
        return float(np.mean(l1**2))
    raise TypeError(f"model families differ: {type(model).__name__} vs {type(truth).__name__}")


def exact_model_error(P_hat: np.ndarray, P_true: np.ndarray, d: np.ndarray) -> float:
    """``sum_{s,a} d(s, a) ||P_hat(.|s,a) - P(.|s,a)||_1^2`` for an explicit occupancy ``d``."""
    l1 = np.abs(np.asarray(P_hat) - np.asarray(P_true)).sum(-1)
    return float(np.sum(d * l1**2))
