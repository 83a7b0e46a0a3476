"""Policy cover, feature covariances and the elliptical exploration bonus."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .core import (TabularMdp, TabularPolicy, d_pi_sample, parallel_map, rollout,
                   sample_occupancy_tabular)
from .features import FeatureMap


class NumericalError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# occupancy batches
# ---------------------------------------------------------------------------

class Batch(NamedTuple):
    """Occupancy draws ``(s_h, a_h, h)`` together with the observed ``s_{h+1}``."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    steps: np.ndarray

    def __len__(self) -> int:
        return len(self.steps)


def _stack(items) -> np.ndarray:
    return np.asarray([np.asarray(x) for x in items])


def concat_batches(batches) -> Batch:
    batches = [b for b in batches if len(b)]
    return Batch(*(np.concatenate([getattr(b, f) for b in batches]) for f in Batch._fields))


def sample_transitions(policy, mdp, n: int, rng: np.random.Generator, mode: str = "iid") -> Batch:
    """Draw occupancy samples from ``d^pi`` plus one further environment step.

    ``mode="iid"`` gives ``n`` independent draws (random truncation time).
    ``mode="trajectory"`` runs ``ceil(n / H)`` full episodes and keeps every
    step, so the sample count is rounded up to a multiple of ``H``; each step
    index appears equally often, which matches ``d^pi`` in expectation.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    H = mdp.horizon
    if isinstance(mdp, TabularMdp) and isinstance(policy, TabularPolicy) and mode == "iid":
        s, a, h = sample_occupancy_tabular(policy, mdp, n, rng)
        return Batch(s, a, mdp.step_batch(s, a, rng), h)
    if mode == "iid":
        def one(g):
            smp = d_pi_sample(policy, mdp, g)
            return smp, mdp.step(smp.state, smp.action, g)

        out = parallel_map(one, rng.spawn(n))
        return Batch(_stack(o[0].state for o in out), _stack(o[0].action for o in out),
                     _stack(o[1] for o in out), np.array([o[0].step for o in out]))
    if mode == "trajectory":
        trajs = parallel_map(lambda g: rollout(policy, mdp, g), rng.spawn(-(-n // H)))
        steps = [t for traj in trajs for t in traj.steps]
        return Batch(_stack(t.state for t in steps), _stack(t.action for t in steps),
                     _stack(t.next_state for t in steps), np.tile(np.arange(H), len(trajs)))
    raise ValueError(f"unknown sampling mode {mode!r}")


def batch_features(feature: FeatureMap, batch: Batch) -> np.ndarray:
    return feature.batch(batch.states, batch.actions)


def covariance(phi: np.ndarray) -> np.ndarray:
    """Average outer product of the rows of ``phi``, symmetrised."""
    phi = np.atleast_2d(phi)
    cov = phi.T @ phi / len(phi)
    return 0.5 * (cov + cov.T)


def estimate_policy_cov(policy, mdp, feature: FeatureMap, K: int, rng: np.random.Generator,
                        mode: str = "iid") -> np.ndarray:
    """``(1/K) sum_i phi(s_i, a_i) phi(s_i, a_i)^T`` over occupancy samples of ``policy``."""
    return covariance(batch_features(feature, sample_transitions(policy, mdp, K, rng, mode)))


# ---------------------------------------------------------------------------
# cover
# ---------------------------------------------------------------------------

@dataclass
class PolicyCover:
    """Ordered policies with the covariance of each one, once estimated.

    The newest policy may still lack a covariance (it is estimated at the
    start of the next iteration), so ``covs`` can be one shorter.
    """

    policies: list = field(default_factory=list)
    covs: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.policies)

    def add(self, policy) -> None:
        self.policies.append(policy)

    def set_cov(self, index: int, cov: np.ndarray) -> None:
        if index != len(self.covs):
            raise ValueError("covariances must be recorded in policy order")
        if index >= len(self.policies):
            raise IndexError("no policy at that index")
        cov = np.asarray(cov, dtype=float)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance is not symmetric")
        self.covs.append(cov)


def aggregate(covs, lam: float, d: int | None = None) -> np.ndarray:
    """``sum_i Sigma_i + lam I`` (a sum, not an average)."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    covs = list(covs.covs if isinstance(covs, PolicyCover) else covs)
    if not covs and d is None:
        raise ValueError("dimension needed for an empty cover")
    d = covs[0].shape[0] if covs else d
    total = lam * np.eye(d)
    for c in covs:
        total = total + c
    return total


def mixture_sample(cover: PolicyCover, mdp, rng: np.random.Generator):
    """One draw from the cover mixture: uniform policy index, then ``d^{pi_i}``."""
    if not len(cover):
        raise ValueError("cover is empty")
    i = int(rng.integers(len(cover)))
    return d_pi_sample(cover.policies[i], mdp, rng)


def mixture_transitions(cover: PolicyCover, mdp, n: int, rng: np.random.Generator,
                        mode: str = "iid") -> Batch:
    """``n`` mixture draws with next states, kept in draw order.

    Policy indices are drawn first; each policy then fills its own slots from
    its own child stream.
    """
    if not len(cover):
        raise ValueError("cover is empty")
    idx = rng.integers(len(cover), size=n)
    children = rng.spawn(len(cover))
    parts, slots = [], []
    for i, g in enumerate(children):
        where = np.flatnonzero(idx == i)
        if len(where):
            b = sample_transitions(cover.policies[i], mdp, len(where), g, mode)
            # trajectory mode rounds up; keep a uniformly chosen subset of steps
            if len(b) > len(where):
                keep = np.sort(g.choice(len(b), size=len(where), replace=False))
                b = Batch(*(x[keep] for x in b))
            parts.append(b)
            slots.append(where)
    order = np.argsort(np.concatenate(slots), kind="stable")
    full = concat_batches(parts)
    return Batch(*(x[order] for x in full))


# ---------------------------------------------------------------------------
# bonus
# ---------------------------------------------------------------------------

BONUS_FORMS = ("main", "proof")


@dataclass(frozen=True, eq=False)
class BonusSpec:
    """Bonus ``min(2 c sqrt(phi^T Sigma^-1 phi), H)`` for a fixed aggregate ``Sigma``.

    ``form="proof"`` uses ``2 min(c sqrt(phi^T Sigma^-1 phi / 2), H)`` instead:
    a factor ``1/sqrt(2)`` below the main form when uncapped, and a cap of ``2H``.
    """

    c: float
    H: float
    lam: float
    sigma_hat: np.ndarray
    form: str = "main"
    _chol: np.ndarray = field(init=False, repr=False)
    _white: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("bonus scale must be non-negative")
        if self.form not in BONUS_FORMS:
            raise ValueError(f"unknown bonus form {self.form!r}")
        S = np.asarray(self.sigma_hat, dtype=float)
        S = 0.5 * (S + S.T)
        try:
            L = linalg.cholesky(S, lower=True)
        except linalg.LinAlgError:
            raise NumericalError(f"covariance not positive definite (cond ~ {np.linalg.cond(S):.3g})") from None
        object.__setattr__(self, "sigma_hat", S)
        object.__setattr__(self, "_chol", L)
        # whitening map (L^-1)^T, so phi^T Sigma^-1 phi = ||phi @ white||^2
        white = linalg.solve_triangular(L, np.eye(len(S)), lower=True).T
        if not np.all(np.isfinite(white)):
            raise NumericalError("covariance inverse is not finite")
        object.__setattr__(self, "_white", np.ascontiguousarray(white))

    @classmethod
    def from_cover(cls, cover, c: float, H: float, lam: float, d: int | None = None,
                   form: str = "main") -> "BonusSpec":
        return cls(c, H, lam, aggregate(cover, lam, d), form)

    @property
    def d(self) -> int:
        return self.sigma_hat.shape[0]

    def quad(self, phi) -> np.ndarray:
        """``phi^T Sigma^-1 phi`` for one vector or the rows of a matrix."""
        phi = np.asarray(phi, dtype=float)
        z = np.atleast_2d(phi) @ self._white
        q = np.einsum("ij,ij->i", z, z)
        return q if phi.ndim > 1 else q[0]

    def __call__(self, phi):
        q = self.quad(phi)
        if self.form == "main":
            b = np.minimum(2 * self.c * np.sqrt(q), self.H)
        else:
            b = 2 * np.minimum(self.c * np.sqrt(q / 2), self.H)
        return float(b) if np.ndim(b) == 0 else b


def bonus(spec: BonusSpec, phi_sa):
    return spec(phi_sa)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

class SandwichReport(NamedTuple):
    min_quad_ratio: float
    max_quad_ratio: float
    min_bonus_ratio: float
    max_bonus_ratio: float
    form: str

    @property
    def quad_ok(self) -> bool:
        """``q / 2 <= q_hat <= 2 q`` at every probe and prefix."""
        return self.min_quad_ratio >= 0.5 and self.max_quad_ratio <= 2.0

    @property
    def bonus_ok(self) -> bool:
        return self.min_bonus_ratio >= 1.0 and self.max_bonus_ratio <= 4.0


def bonus_sandwich_check(true_covs, empirical_covs, probes, lam: float, c: float = 1.0,
                         H: float = math.inf, form: str = "main") -> SandwichReport:
    """Compare empirical and exact quadratic forms / bonuses over every prefix.

    The exact bonus is ``min(c sqrt(phi^T Sigma_n^-1 phi), H)`` (no factor 2);
    probes where it vanishes are skipped in the bonus ratio.
    """
    if len(true_covs) != len(empirical_covs):
        raise ValueError("covariance lists differ in length")
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    d = probes.shape[1]
    qr, br = [], []
    for n in range(1, len(true_covs) + 1):
        exact = BonusSpec(c, H, lam, aggregate(true_covs[:n], lam, d), "main")
        emp = BonusSpec(c, H, lam, aggregate(empirical_covs[:n], lam, d), form)
        q, q_hat = exact.quad(probes), emp.quad(probes)
        live = q > 0
        qr.append(q_hat[live] / q[live])
        b = np.minimum(c * np.sqrt(q), H)
        b_hat = emp(probes)
        live = b > 0
        br.append(b_hat[live] / b[live])
    qr = np.concatenate(qr) if qr else np.ones(1)
    br = np.concatenate(br) if br else np.ones(1)
    return SandwichReport(float(qr.min()), float(qr.max()), float(br.min()), float(br.max()), form)


def sandwich_sample_size(N: int, d: int, lam: float, delta: float) -> int:
    """``K = 32 N^2 ln(8 N d / delta) / lam^2``, rounded up."""
    return math.ceil(32 * N**2 * math.log(8 * N * d / delta) / lam**2)


def _logdet(M: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(M)
    if sign <= 0:
        raise NumericalError("matrix is not positive definite")
    return float(val)


def information_gain(covs, lam: float, d: int | None = None) -> float:
    """``ln det(I + (1/lam) sum_i Sigma_i)`` for the realised sequence."""
    covs = list(covs)
    if not covs:
        return 0.0
    d = covs[0].shape[0]
    return _logdet(np.eye(d) + sum(covs) / lam)


def information_gain_bound(d: int, N: int, lam: float) -> float:
    return d * math.log(1 + N / lam)


class TelescopeViolation(AssertionError):
    pass


def trace_telescope_check(seq, lam: float) -> tuple[float, float]:
    """Both sides of ``2 ln det M_N - 2 ln det(lam I) >= sum_i tr(Sigma_i M_{i-1}^-1)``.

    ``M_0 = lam I`` and ``M_i = M_{i-1} + Sigma_i``. Every ``Sigma_i`` must be
    PSD with eigenvalues at most ``min(1, lam)``. The cap by ``lam`` matters:
    with ``lam = 0.01`` and a single ``Sigma = 1`` (d = 1) the left side is
    ``2 ln 101 ~ 9.2`` while the right side is 100.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    seq = [np.asarray(S, dtype=float) for S in seq]
    if not seq:
        return 0.0, 0.0
    d = seq[0].shape[0]
    M = lam * np.eye(d)
    rhs = 0.0
    for i, S in enumerate(seq):
        ev = np.linalg.eigvalsh(0.5 * (S + S.T))
        if ev.max() > min(1.0, lam) + 1e-12 or ev.min() < -1e-10:
            raise ValueError(f"element {i}: eigenvalues must lie in [0, min(1, lambda)]")
        rhs += float(np.trace(np.linalg.solve(M, S)))
        M = M + S
    lhs = 2 * _logdet(M) - 2 * d * math.log(lam)
    if lhs < rhs - 1e-9:
        raise TelescopeViolation(f"lhs {lhs:.12g} < rhs {rhs:.12g}")
    return lhs, rhs
