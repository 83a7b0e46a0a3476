"""State-action feature maps with ``||phi(s, a)||_2 <= 1``.

Every map is callable as ``phi(s, a)`` for a single pair and exposes
``batch(S, A)`` for stacked inputs (rows are pairs). Continuous inputs are
the concatenation ``x = [s, a]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .matrix_io import load_matrices, save_matrices


def _concat(S, A) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim < 2:
        S = S.reshape(1, -1) if S.ndim == 1 else S.reshape(1, 1)
    A = np.asarray(A, dtype=float).reshape(len(S), -1)
    return np.concatenate([S, A], axis=1)


class FeatureMap:
    kind = "custom"
    d: int

    def __call__(self, s, a) -> np.ndarray:
        return self.batch(np.atleast_1d(np.asarray(s, dtype=float))[None, :],
                          np.atleast_1d(np.asarray(a, dtype=float))[None, :])[0]

    def batch(self, S, A) -> np.ndarray:
        raise NotImplementedError


@dataclass(eq=False)
class RffFeatures(FeatureMap):
    """Random Fourier features for the RBF kernel ``exp(-||x - y||^2 / (2 bw^2))``.

    ``phi(x) = sqrt(2/d) cos(omega x + b) / sqrt(2)``. The extra ``1/sqrt(2)``
    guarantees ``||phi|| <= 1``, so ``phi(x) . phi(y)`` estimates half the kernel
    (see :attr:`kernel_scale`). Inputs are divided by ``input_scale`` first.
    """

    omega: np.ndarray
    phase: np.ndarray
    bandwidth: float
    input_scale: np.ndarray | None = None
    kind = "rff"
    kernel_scale = 0.5

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.phase = np.asarray(self.phase, dtype=float)
        if self.input_scale is not None:
            self.input_scale = np.asarray(self.input_scale, dtype=float)
        # input scaling and the 1/sqrt(d) factor folded into one projection
        scale = 1.0 if self.input_scale is None else self.input_scale
        self._proj = np.ascontiguousarray((self.omega / scale).T)
        self._norm = 1.0 / np.sqrt(self.d)

    @property
    def d(self) -> int:
        return self.omega.shape[0]

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = X @ self._proj
        Z += self.phase
        np.cos(Z, out=Z)
        Z *= self._norm
        return Z

    def batch(self, S, A) -> np.ndarray:
        return self.transform(_concat(S, A))


def rff_new(input_dim: int, d: int = 20, bandwidth: float = 1.0, seed: int = 0,
            input_scale=None) -> RffFeatures:
    """Draw an RFF map: frequencies ``N(0, I / bw^2)``, phases ``U[0, 2 pi)``."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((d, input_dim)) / bandwidth
    phase = rng.uniform(0.0, 2 * np.pi, size=d)
    return RffFeatures(omega, phase, float(bandwidth), input_scale)


def one_hot(s_index: int, a_index: int, n_states: int, n_actions: int) -> np.ndarray:
    if not (0 <= s_index < n_states and 0 <= a_index < n_actions):
        raise IndexError(f"({s_index}, {a_index}) out of range for {n_states}x{n_actions}")
    v = np.zeros(n_states * n_actions)
    v[s_index * n_actions + a_index] = 1.0
    return v


@dataclass(eq=False)
class OneHotFeatures(FeatureMap):
    """Tabular embedding: ``phi(s, a) = e_{s * |A| + a}``."""

    n_states: int
    n_actions: int
    kind = "one_hot"

    @property
    def d(self) -> int:
        return self.n_states * self.n_actions

    def __call__(self, s, a) -> np.ndarray:
        return one_hot(int(s), int(a), self.n_states, self.n_actions)

    def batch(self, S, A) -> np.ndarray:
        S = np.asarray(S, dtype=int).ravel()
        A = np.asarray(A, dtype=int).ravel()
        out = np.zeros((len(S), self.d))
        out[np.arange(len(S)), S * self.n_actions + A] = 1.0
        return out

    def matrix(self) -> np.ndarray:
        """Features of every pair, shape ``(S, A, d)``."""
        return np.eye(self.d).reshape(self.n_states, self.n_actions, self.d)


@dataclass(eq=False)
class PolynomialFeatures(FeatureMap):
    """All monomials of total degree ``<= degree`` over a declared input box.

    Inputs are clipped to the box and the vector is divided by its largest
    norm over the box, attained at the corner of largest magnitudes.
    """

    degree: int
    low: np.ndarray
    high: np.ndarray
    kind = "polynomial"
    exponents: np.ndarray = field(init=False, repr=False)
    scale: float = field(init=False)

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=float)
        self.high = np.asarray(self.high, dtype=float)
        n = len(self.low)
        exps = [e for e in itertools.product(range(self.degree + 1), repeat=n) if sum(e) <= self.degree]
        exps.sort(key=lambda e: (sum(e), tuple(-x for x in e)))
        self.exponents = np.array(exps, dtype=int).reshape(-1, n)
        corner = np.maximum(np.abs(self.low), np.abs(self.high))
        self.scale = float(np.linalg.norm(np.prod(corner ** self.exponents, axis=1)))

    @property
    def d(self) -> int:
        return len(self.exponents)

    def transform(self, X) -> np.ndarray:
        X = np.clip(np.atleast_2d(np.asarray(X, dtype=float)), self.low, self.high)
        return np.prod(X[:, None, :] ** self.exponents[None], axis=2) / self.scale

    def batch(self, S, A) -> np.ndarray:
        return self.transform(_concat(S, A))


@dataclass(eq=False)
class LinearFeatures(FeatureMap):
    """``phi(s, a) = [s, a] / radius``, saturating to unit norm outside the ball."""

    radius: float
    input_dim: int
    kind = "linear"

    @property
    def d(self) -> int:
        return self.input_dim

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float)) / self.radius
        n = np.sqrt(np.einsum("ij,ij->i", X, X))[:, None]
        return X / np.maximum(n, 1.0)

    def batch(self, S, A) -> np.ndarray:
        return self.transform(_concat(S, A))


@dataclass(eq=False)
class ConcatFeatures(FeatureMap):
    """Weighted concatenation; weights are rescaled so their squares sum to 1."""

    parts: list
    weights: np.ndarray | None = None
    kind = "concat"

    def __post_init__(self):
        w = np.ones(len(self.parts)) if self.weights is None else np.asarray(self.weights, float)
        self.weights = w / np.linalg.norm(w)

    @property
    def d(self) -> int:
        return sum(p.d for p in self.parts)

    def batch(self, S, A) -> np.ndarray:
        return np.concatenate([w * p.batch(S, A) for w, p in zip(self.weights, self.parts)], axis=1)


@dataclass(eq=False)
class CustomFeatures(FeatureMap):
    """Wrap ``fn(S, A) -> (n, d)``; rows with norm above 1 are rescaled onto the sphere."""

    fn: Callable
    dim: int

    @property
    def d(self) -> int:
        return self.dim

    def batch(self, S, A) -> np.ndarray:
        Phi = np.atleast_2d(np.asarray(self.fn(S, A), dtype=float))
        n = np.linalg.norm(Phi, axis=1, keepdims=True)
        return Phi / np.maximum(n, 1.0)


def save_rff(path, fmap: RffFeatures) -> None:
    scale = fmap.input_scale if fmap.input_scale is not None else np.ones(fmap.omega.shape[1])
    save_matrices(path, [fmap.omega, fmap.phase, [fmap.bandwidth], scale])


def load_rff(path) -> RffFeatures:
    omega, phase, bw, scale = load_matrices(path)
    return RffFeatures(omega, phase[0], float(bw[0, 0]), scale[0])
