"""Maximum-likelihood reward estimation from pairwise trajectory preferences.

Each record holds the trajectory-feature difference ``x = phi(tau1) - phi(tau0)``,
the observed preference ``o`` (1 when ``tau1`` won) and the query flag ``Z``.
Only queried records enter the likelihood

    sum_{Z=1} ln( o * Phi(x^T theta) + (1 - o) * Phi(-x^T theta) ),

which is maximised over the ball ``||theta|| <= B`` by projected gradient ascent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import expit

from .env import LinkFunction, LinkKind
from .errors import NumericalError

AFFINE_EDGE = 1e-9


@dataclass(frozen=True)
class PreferenceRecord:
    delta: np.ndarray
    o: int
    z: int = 1


@dataclass(frozen=True)
class PreferenceDataset:
    dim: int
    records: tuple[PreferenceRecord, ...] = ()

    def __post_init__(self):
        for rec in self.records:
            if np.shape(rec.delta) != (self.dim,):
                raise ValueError(f"record feature difference must have length {self.dim}")

    @classmethod
    def from_arrays(cls, deltas, o, z=None) -> "PreferenceDataset":
        deltas = np.array(deltas, dtype=float, ndmin=2)
        o = np.asarray(o, dtype=int)
        z = np.ones(len(o), dtype=int) if z is None else np.asarray(z, dtype=int)
        if not len(deltas) == len(o) == len(z):
            raise ValueError("deltas, o and z must have the same length")
        records = []
        for x, oi, zi in zip(deltas, o, z):
            x = x.copy()
            x.flags.writeable = False
            records.append(PreferenceRecord(x, int(oi), int(zi)))
        return cls(deltas.shape[1], tuple(records))

    def add(self, delta, o: int, z: int = 1) -> "PreferenceDataset":
        delta = np.array(delta, dtype=float)
        delta.flags.writeable = False
        return PreferenceDataset(self.dim, self.records + (PreferenceRecord(delta, int(o), int(z)),))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_queried(self) -> int:
        return sum(rec.z for rec in self.records)

    def compressed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distinct queried differences with their counts of ``o = 1`` and ``o = 0``.

        The likelihood is a sum over records, so grouping identical differences
        leaves it unchanged.
        """
        return self._compressed

    @cached_property
    def _compressed(self):
        queried = [rec for rec in self.records if rec.z]
        if not queried:
            return np.zeros((0, self.dim)), np.zeros(0), np.zeros(0)
        X = np.stack([rec.delta for rec in queried])
        o = np.array([rec.o for rec in queried], dtype=float)
        uniq, inverse = np.unique(X, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
        wins = np.bincount(inverse, weights=o, minlength=len(uniq))
        losses = np.bincount(inverse, weights=1.0 - o, minlength=len(uniq))
        for a in (uniq, wins, losses):
            a.flags.writeable = False
        return uniq, wins, losses


@dataclass(frozen=True)
class MleConfig:
    radius: float
    step_size: float | None = None
    max_iter: int = 500
    tol: float = 1e-8

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValueError("max_iter and tol must be positive")

    def default_step(self, n: int) -> float:
        return self.step_size if self.step_size is not None else 0.1 / math.sqrt(1 + n)


@dataclass
class MleResult:
    theta: np.ndarray
    iterations: int
    converged: bool
    clamp_count: int = 0
    history: list[float] = field(default_factory=list)


def _objective(theta, X, wins, losses, link: LinkFunction, clamp: bool):
    with np.errstate(invalid="ignore"):
        u = X @ theta
    if link.kind is LinkKind.BTL:
        # counts and log-probabilities are finite for finite u, so no masking is needed;
        # non-finite features surface as a NaN objective, which the caller reports
        with np.errstate(invalid="ignore"):
            ll = -float(wins @ np.logaddexp(0.0, -u) + losses @ np.logaddexp(0.0, u))
            s = expit(u)
        return ll, X.T @ (wins - (wins + losses) * s), 0
    clamped = 0
    edge = link.half_width * (1 - AFFINE_EDGE)
    if clamp:
        outside = np.abs(u) > edge
        clamped = int(outside.sum())
        u = np.clip(u, -edge, edge)
    else:
        link.check_domain(u)
    # skip zero-count terms so that ln(0) at an unused side cannot poison the sum
    with np.errstate(invalid="ignore"):
        ll = float(np.sum(np.where(wins > 0, wins * link.log_prob(u), 0.0))
                   + np.sum(np.where(losses > 0, losses * link.log_prob(-u), 0.0)))
        coef = np.where(wins > 0, wins * link.score(u), 0.0) - np.where(losses > 0, losses * link.score(-u), 0.0)
    return ll, X.T @ coef, clamped


def _arrays(data: PreferenceDataset):
    return data.compressed()


def log_likelihood(theta, data: PreferenceDataset, link: LinkFunction) -> float:
    X, wins, losses = _arrays(data)
    if len(X) == 0:
        return 0.0
    ll, _, _ = _objective(np.asarray(theta, dtype=float), X, wins, losses, link, clamp=False)
    return ll


def log_likelihood_gradient(theta, data: PreferenceDataset, link: LinkFunction) -> np.ndarray:
    X, wins, losses = _arrays(data)
    if len(X) == 0:
        return np.zeros(data.dim)
    _, grad, _ = _objective(np.asarray(theta, dtype=float), X, wins, losses, link, clamp=False)
    return grad


def project_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    norm = math.sqrt(float(theta @ theta))
    if norm <= radius:
        return theta
    return theta * (radius / norm)


def mle_fit_detailed(
    data: PreferenceDataset,
    link: LinkFunction,
    config: MleConfig,
    init=None,
) -> MleResult:
    """Projected gradient ascent from ``init`` (default the origin).

    The step starts at the configured size and is halved until the objective
    does not decrease, so the iterates ascend monotonically.  Iteration stops
    when the projected-gradient norm drops below ``tol``.
    """
    X, wins, losses = _arrays(data)
    theta = np.zeros(data.dim) if init is None else project_ball(np.array(init, dtype=float), config.radius)
    if len(X) == 0:
        return MleResult(np.zeros(data.dim), 0, True)
    n = int(wins.sum() + losses.sum())
    step0 = config.default_step(n)
    clamp_total = 0

    ll, grad, clamped = _objective(theta, X, wins, losses, link, clamp=True)
    clamp_total += clamped
    history = [ll]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        if not (math.isfinite(ll) and math.isfinite(float(grad @ grad))):
            raise NumericalError(
                f"non-finite likelihood during MLE at iteration {it}: ll={ll}, "
                f"theta={theta.tolist()}, n={n}"
            )
        step = step0
        while True:
            candidate = project_ball(theta + step * grad, config.radius)
            move = candidate - theta
            pg_norm = math.sqrt(float(move @ move)) / step
            if pg_norm < config.tol:
                converged = True
                break
            ll_new, grad_new, clamped = _objective(candidate, X, wins, losses, link, clamp=True)
            if ll_new >= ll:
                break
            step *= 0.5
            if step < step0 * 1e-12:
                # no ascent possible at any representable step: stationary up to rounding
                converged = True
                break
        if converged:
            break
        theta, ll, grad = candidate, ll_new, grad_new
        clamp_total += clamped
        history.append(ll)
    return MleResult(theta, it, converged, clamp_total, history)


def mle_fit(data: PreferenceDataset, link: LinkFunction, config: MleConfig, init=None) -> np.ndarray:
    return mle_fit_detailed(data, link, config, init).theta
