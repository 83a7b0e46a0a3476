"""Transition model families: Gaussian KNRs and finite-candidate linear MDPs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, OneHotFeatures
from .matrix_io import load_matrices, save_matrices

NEG_MASS_TOL = 1e-6


# ---------------------------------------------------------------------------
# KNR
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KnrModel:
    """Kernelized nonlinear regulator ``s' = W phi(s, a) + N(0, sigma^2 I)``.

    With ``residual=True`` the mean is ``s + W phi(s, a)`` instead, i.e. the
    regression target is the state increment. ``feature`` is only needed for
    the ``(s, a)``-level helpers (:meth:`mean_next`, :meth:`step`).
    """

    W: np.ndarray
    sigma: float
    F: float
    feature: FeatureMap | None = None
    residual: bool = False

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        object.__setattr__(self, "W", W)
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.F <= 0:
            raise ValueError("F must be positive")
        norm = np.linalg.norm(W)
        if norm > self.F * (1 + 1e-9) + 1e-12:
            raise ValueError(f"||W||_F = {norm:.6g} exceeds the budget F = {self.F:.6g}")
        if self.feature is not None and self.feature.d != W.shape[1]:
            raise ValueError(f"feature dimension {self.feature.d} != W columns {W.shape[1]}")

    @property
    def state_dim(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    def with_weights(self, W) -> "KnrModel":
        return KnrModel(W, self.sigma, self.F, self.feature, self.residual)

    def mean(self, phi) -> np.ndarray:
        return np.asarray(phi, dtype=float) @ self.W.T

    def mean_next(self, S, A) -> np.ndarray:
        """Batched noiseless prediction for stacked states and actions."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        out = self.feature.batch(S, A) @ self.W.T
        return S + out if self.residual else out

    def step(self, s, a, rng: np.random.Generator) -> np.ndarray:
        phi = self.feature(s, a)
        nxt = knr_sample(self, phi, rng)
        return np.asarray(s, dtype=float) + nxt if self.residual else nxt


def _check_phi(model: KnrModel, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != model.feature_dim:
        raise ValueError(f"feature has dimension {phi.shape[-1]}, model expects {model.feature_dim}")
    if np.any(np.linalg.norm(phi, axis=-1) > 1 + 1e-9):
        raise ValueError("feature vectors must have norm <= 1")
    return phi


def knr_sample(model: KnrModel, phi_sa, rng: np.random.Generator) -> np.ndarray:
    """Draw ``W phi + sigma z`` with ``z`` standard normal."""
    phi = _check_phi(model, phi_sa)
    mean = phi @ model.W.T
    return mean + model.sigma * rng.standard_normal(mean.shape)


def knr_log_likelihood(model: KnrModel, phi_sa, next_state) -> float | np.ndarray:
    """Gaussian log-density of ``next_state`` under ``N(W phi, sigma^2 I)``.

    Uses the standard ``1 / (2 sigma^2)`` exponent. With ``sigma = 0`` the
    density is a point mass: ``-inf`` off the mean and ``+inf`` on it.
    """
    phi = _check_phi(model, phi_sa)
    resid = np.asarray(next_state, dtype=float) - phi @ model.W.T
    if resid.shape[-1] != model.state_dim:
        raise ValueError("next_state dimension does not match the model")
    sq = np.sum(resid**2, axis=-1)
    d_s = model.state_dim
    if model.sigma == 0:
        return np.where(sq > 0, -np.inf, np.inf) if np.ndim(sq) else (-math.inf if sq > 0 else math.inf)
    return -sq / (2 * model.sigma**2) - 0.5 * d_s * math.log(2 * math.pi * model.sigma**2)


def gaussian_tv_bound(mu1, mu2, sigma: float) -> float:
    """Upper bound ``min(||mu1 - mu2|| / sigma, 1)`` on TV between ``N(mu_i, sigma^2 I)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    gap = float(np.linalg.norm(np.asarray(mu1, float) - np.asarray(mu2, float)))
    return min(gap / sigma, 1.0)


def state_norm_bound(F: float, sigma: float, d_s: int, M: float, delta: float) -> float:
    """High-probability bound ``F + sigma sqrt(d_s ln(d_s M / delta))`` on ``||s'||``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if F <= 0 or sigma < 0 or d_s < 1 or M <= 0:
        raise ValueError("F, d_s, M must be positive and sigma non-negative")
    return F + sigma * math.sqrt(d_s * math.log(d_s * M / delta))


# ---------------------------------------------------------------------------
# linear MDPs / tabular
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularModel:
    """Explicit transition table ``P[s, a, s']``."""

    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))

    def transition_table(self) -> np.ndarray:
        return self.P


def _validate_rows(P: np.ndarray, k: int) -> np.ndarray:
    low = P.min()
    if low < -NEG_MASS_TOL:
        raise ValueError(f"candidate {k}: negative transition mass {low:.3g}")
    sums = P.sum(-1)
    if np.max(np.abs(sums - 1)) > NEG_MASS_TOL:
        raise ValueError(f"candidate {k}: rows sum to [{sums.min():.6g}, {sums.max():.6g}], not 1")
    P = np.clip(P, 0.0, None)
    return P / P.sum(-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class LinearMdpModel:
    """``P(s' | s, a) = <mu(s'), phi(s, a)>`` with ``mu`` drawn from a finite list.

    Each candidate ``mu`` has one row per next state (shape ``(S, d)``). The
    induced tables are validated, clipped and renormalised at construction.
    """

    candidates: list
    feature: FeatureMap
    n_actions: int
    selected_index: int = 0
    tables: list = field(init=False, repr=False)

    def __post_init__(self):
        mus = [np.asarray(m, dtype=float) for m in self.candidates]
        if not mus:
            raise ValueError("need at least one candidate")
        S, d = mus[0].shape
        if d != self.feature.d:
            raise ValueError(f"candidate width {d} != feature dimension {self.feature.d}")
        if not 0 <= self.selected_index < len(mus):
            raise IndexError("selected_index out of range")
        grid_s, grid_a = np.meshgrid(np.arange(S), np.arange(self.n_actions), indexing="ij")
        Phi = self.feature.batch(grid_s.ravel(), grid_a.ravel()).reshape(S, self.n_actions, d)
        tables = []
        for k, mu in enumerate(mus):
            if mu.shape != (S, d):
                raise ValueError(f"candidate {k} has shape {mu.shape}, expected {(S, d)}")
            tables.append(_validate_rows(np.einsum("td,sad->sat", mu, Phi), k))
            # max over ||nu||_inf <= 1 of each coordinate of mu^T nu is sum_s' |mu[s', i]|
            bound = np.linalg.norm(np.abs(mu).sum(axis=0))
            if bound > math.sqrt(d) * (1 + 1e-9):
                raise ValueError(f"candidate {k}: ||mu^T nu||_2 can reach {bound:.4g} > sqrt(d)")
        object.__setattr__(self, "candidates", mus)
        object.__setattr__(self, "tables", tables)

    @classmethod
    def from_tables(cls, tables, selected_index: int = 0) -> "LinearMdpModel":
        """Embed explicit tables via one-hot features: ``mu[s', (s, a)] = P[s, a, s']``."""
        tables = [np.asarray(P, dtype=float) for P in tables]
        S, A, _ = tables[0].shape
        mus = [P.reshape(S * A, S).T for P in tables]
        return cls(mus, OneHotFeatures(S, A), A, selected_index)

    @property
    def n_states(self) -> int:
        return self.candidates[0].shape[0]

    def __len__(self) -> int:
        return len(self.candidates)

    def with_index(self, k: int) -> "LinearMdpModel":
        if not 0 <= k < len(self.candidates):
            raise IndexError("candidate index out of range")
        m = object.__new__(LinearMdpModel)
        for name in ("candidates", "feature", "n_actions", "tables"):
            object.__setattr__(m, name, getattr(self, name))
        object.__setattr__(m, "selected_index", k)
        return m

    def transition_table(self, k: int | None = None) -> np.ndarray:
        return self.tables[self.selected_index if k is None else k]


def linmdp_next_dist(model: LinearMdpModel, s: int, a: int) -> np.ndarray:
    if not (0 <= s < model.n_states and 0 <= a < model.n_actions):
        raise IndexError(f"({s}, {a}) out of range")
    return model.transition_table()[s, a]


def transition_table(model) -> np.ndarray:
    """Explicit ``P[s, a, s']`` for any tabular-evaluable model."""
    if isinstance(model, np.ndarray):
        return model
    if isinstance(model, (TabularModel, LinearMdpModel)):
        return model.transition_table()
    if hasattr(model, "P"):
        return np.asarray(model.P)
    raise TypeError(f"{type(model).__name__} has no transition table")


def save_linmdp(path, model: LinearMdpModel) -> None:
    save_matrices(path, model.candidates)


def save_knr(path, model: KnrModel) -> None:
    save_matrices(path, [model.W, [[model.sigma, model.F]]])


def load_knr(path, feature: FeatureMap | None = None, residual: bool = False) -> KnrModel:
    W, params = load_matrices(path)
    return KnrModel(W, float(params[0, 0]), float(params[0, 1]), feature, residual)
