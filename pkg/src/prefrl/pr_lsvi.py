"""Preference-based randomized least-squares value iteration for linear MDPs.

Every episode the agent

1. fits the reward parameter by maximum likelihood on the queried comparisons,
2. perturbs it with Gaussian noise shaped by the trajectory covariance,
3. runs a randomized, truncated least-squares value iteration backwards in ``h``,
4. plays the greedy policy against the previous episode's greedy policy,
5. asks for a preference only when the two trajectories' expected reward
   disagreement under the perturbation distribution exceeds ``epsilon``.

Steps are 0-indexed; at step ``h`` the truncation level (remaining horizon) is
``H - 1 - h``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .env import LinearMdp, LinkFunction, Policy, rollout, trajectory_feature
from .errors import ConfigurationError
from .linalg import (
    PsdMatrix,
    mahalanobis,
    rank_one_update,
    ridge_solve,
    sample_correlated_gaussian,
)
from .records import EpisodeRecord
from .reward_mle import MleConfig, PreferenceDataset, mle_fit


class QueryMode(str, Enum):
    CLOSED_FORM = "closed_form"
    MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True)
class PrLsviConfig:
    sigma_r: float = 0.5
    sigma_p: float = 1.0
    epsilon: float = 0.1
    alpha_l: float = 0.25
    alpha_u: float = 0.5
    ridge_lambda: float = 1.0
    reward_bound: float | None = None
    query_mode: QueryMode = QueryMode.CLOSED_FORM
    mc_samples: int = 1000
    mode: str = "practical"
    link: LinkFunction = field(default_factory=LinkFunction.btl)
    # iterations per episode; with warm starting the ascent continues across episodes
    mle_max_iter: int = 50
    mle_tol: float = 1e-8
    mle_step: float | None = None
    mle_warm_start: bool = True

    def __post_init__(self):
        object.__setattr__(self, "query_mode", QueryMode(self.query_mode))
        if not (self.sigma_r > 0 and self.sigma_p > 0):
            raise ConfigurationError("sigma_r and sigma_p must be positive")
        if not self.epsilon >= 0:
            raise ConfigurationError("epsilon must be non-negative")
        if not 0 < self.alpha_l < self.alpha_u:
            raise ConfigurationError(
                f"need 0 < alpha_l < alpha_u, got alpha_l={self.alpha_l}, alpha_u={self.alpha_u}"
            )
        if not self.ridge_lambda > 0:
            raise ConfigurationError("ridge_lambda must be positive")
        if self.reward_bound is not None and not self.reward_bound > 0:
            raise ConfigurationError("reward_bound must be positive")
        if self.mc_samples < 1:
            raise ConfigurationError("mc_samples must be at least 1")
        if self.mode not in ("practical", "theory"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "theory" and not (
            self.ridge_lambda == 1.0 and self.alpha_l == self.alpha_u / 2
        ):
            raise ConfigurationError("theory mode requires ridge_lambda = 1 and alpha_l = alpha_u / 2")


@dataclass(frozen=True)
class PrLsviState:
    t: int
    traj_cov: PsdMatrix
    step_covs: tuple[PsdMatrix, ...]
    preferences: PreferenceDataset
    # transition counts n[h, s, a, s'] from the greedy (tau^0) rollouts
    transition_counts: np.ndarray
    prev_policy: Policy
    theta_hat: np.ndarray
    rng: np.random.Generator

    @property
    def horizon(self) -> int:
        return len(self.step_covs)


def init_state(env: LinearMdp, config: PrLsviConfig, rng, initial_policy: Policy | None = None) -> PrLsviState:
    d, H = env.dim, env.horizon
    lam = PsdMatrix.scaled_identity(d, config.ridge_lambda)
    if initial_policy is None:
        initial_policy = Policy.constant(H, env.n_states, 0)
    initial_policy.validate(env)
    counts = np.zeros((H, env.n_states, env.n_actions, env.n_states), dtype=np.int64)
    return PrLsviState(
        t=1,
        traj_cov=lam,
        step_covs=tuple(lam for _ in range(H)),
        preferences=PreferenceDataset(d),
        transition_counts=counts,
        prev_policy=initial_policy,
        theta_hat=np.zeros(d),
        rng=rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng),
    )


# ---------------------------------------------------------------------------
# Truncated value estimate
# ---------------------------------------------------------------------------


def omega(phi_sa, theta_p, cov_prev: PsdMatrix, alpha_l: float, alpha_u: float, h: int, horizon: int) -> float:
    """Next-step value estimate, blended continuously into the cap ``H - 1 - h`` as ``phi`` grows uncertain."""
    if not alpha_l < alpha_u:
        raise ValueError("alpha_l must be smaller than alpha_u")
    m = mahalanobis(phi_sa, cov_prev, "inverse")
    return float(_omega_from_norm(np.asarray(m), np.dot(phi_sa, theta_p), alpha_l, alpha_u, horizon - 1 - h))


def _omega_from_norm(m, linear, alpha_l, alpha_u, cap):
    rho = (alpha_u - m) / (alpha_u - alpha_l)
    mid = rho * linear + (1.0 - rho) * cap
    return np.where(m <= alpha_l, linear, np.where(m > alpha_u, float(cap), mid))


@dataclass(frozen=True)
class RandomizedValueFn:
    features: np.ndarray
    theta_r: np.ndarray
    theta_p_hat: np.ndarray
    theta_p: np.ndarray
    norms: np.ndarray  # ||phi(s,a)||_{Sigma_{t-1,h}^{-1}}, shape (H, S, A)
    alpha_l: float
    alpha_u: float

    @property
    def horizon(self) -> int:
        return self.theta_p.shape[0]

    def omega(self, h: int) -> np.ndarray:
        linear = self.features @ self.theta_p[h]
        return _omega_from_norm(self.norms[h], linear, self.alpha_l, self.alpha_u, self.horizon - 1 - h)

    def q_values(self, h: int) -> np.ndarray:
        return self.features @ self.theta_r + self.omega(h)

    def values(self, h: int) -> np.ndarray:
        if h >= self.horizon:
            return np.zeros(self.features.shape[0])
        return self.q_values(h).max(axis=1)


def _step_norms(features: np.ndarray, cov: PsdMatrix) -> np.ndarray:
    S, A, d = features.shape
    return mahalanobis(features.reshape(S * A, d), cov, "inverse").reshape(S, A)


def lsvi_backward(
    state: PrLsviState, theta_r, config: PrLsviConfig, features: np.ndarray, rng
) -> RandomizedValueFn:
    """Randomized least-squares value iteration over all steps, last to first.

    The value-regression target at step ``h`` is the truncated value of step
    ``h + 1`` evaluated at the observed next states.
    """
    H = state.horizon
    S, A, d = features.shape
    theta_r = np.asarray(theta_r, dtype=float)
    theta_hat = np.zeros((H, d))
    theta_bar = np.zeros((H, d))
    norms = np.stack([_step_norms(features, cov) for cov in state.step_covs])
    reward_part = features @ theta_r
    flat = features.reshape(S * A, d)
    next_values = np.zeros(S)
    for h in range(H - 1, -1, -1):
        if h < H - 1:
            counts = state.transition_counts[h].reshape(S * A, S)
            target = flat.T @ (counts @ next_values)
            theta_hat[h] = ridge_solve(state.step_covs[h], target)
            theta_bar[h] = sample_correlated_gaussian(theta_hat[h], config.sigma_p**2, state.step_covs[h], rng)
        q = reward_part + _omega_from_norm(
            norms[h], features @ theta_bar[h], config.alpha_l, config.alpha_u, H - 1 - h
        )
        next_values = q.max(axis=1)
    return RandomizedValueFn(features, theta_r, theta_hat, theta_bar, norms, config.alpha_l, config.alpha_u)


def greedy_policy(vf: RandomizedValueFn, env=None) -> Policy:
    """Per-step argmax of the perturbed Q-function, ties to the lowest action."""
    return Policy(np.stack([np.argmax(vf.q_values(h), axis=1) for h in range(vf.horizon)]))


# ---------------------------------------------------------------------------
# Query rule
# ---------------------------------------------------------------------------


def query_uncertainty_closed(delta_phi, cov_prev: PsdMatrix, sigma_r: float) -> float:
    """Exact ``E|delta^T (theta_0 - theta_1)|`` for ``theta_i ~ N(., sigma_r^2 Sigma^{-1})``."""
    m = mahalanobis(np.asarray(delta_phi, dtype=float), cov_prev, "inverse")
    return 2.0 * sigma_r / math.sqrt(math.pi) * m


def query_uncertainty_mc(theta_hat, sigma_r: float, cov_prev: PsdMatrix, delta_phi, n_samples: int, rng) -> float:
    """Monte-Carlo estimate of the same expectation from ``n_samples`` parameter pairs.

    The shared centre cancels in ``theta_0 - theta_1``; only the noise parts are
    drawn, which also makes the estimate independent of ``theta_hat`` bit for bit.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    delta_phi = np.asarray(delta_phi, dtype=float)
    if np.shape(theta_hat) != delta_phi.shape:
        raise ValueError("theta_hat and delta_phi must have the same shape")
    if not np.any(delta_phi):
        return 0.0
    # delta^T L^{-T} u == (L^{-1} delta)^T u
    w = cov_prev.whiten(delta_phi)
    u0 = rng.standard_normal((n_samples, len(w)))
    u1 = rng.standard_normal((n_samples, len(w)))
    diffs = sigma_r * (u0 @ w - u1 @ w)
    return float(np.mean(np.abs(diffs)))


# ---------------------------------------------------------------------------
# Episode
# ---------------------------------------------------------------------------


def reward_radius(env: LinearMdp, config: PrLsviConfig) -> float:
    return config.reward_bound if config.reward_bound is not None else env.reward_bound


def pr_lsvi_episode(
    state: PrLsviState, env: LinearMdp, oracle, config: PrLsviConfig, rng
) -> tuple[PrLsviState, EpisodeRecord]:
    """One episode.  ``state.rng`` drives the agent's perturbations, ``rng`` the rollouts.

    Returns a new state; ``state`` itself is left untouched even if an error
    is raised part-way.
    """
    agent_rng = copy.deepcopy(state.rng)
    mle_cfg = MleConfig(
        radius=reward_radius(env, config),
        step_size=config.mle_step,
        max_iter=config.mle_max_iter,
        tol=config.mle_tol,
    )
    init = state.theta_hat if config.mle_warm_start else None
    theta_hat = mle_fit(state.preferences, config.link, mle_cfg, init=init)
    theta_r = sample_correlated_gaussian(theta_hat, config.sigma_r**2, state.traj_cov, agent_rng)
    vf = lsvi_backward(state, theta_r, config, env.features, agent_rng)
    pi0 = greedy_policy(vf, env)
    pi1 = state.prev_policy

    tau0 = rollout(env, pi0, rng)
    tau1 = rollout(env, pi1, rng)
    phi0 = trajectory_feature(env, tau0)
    phi1 = trajectory_feature(env, tau1)
    delta = phi0 - phi1
    potential = mahalanobis(delta, state.traj_cov, "inverse") ** 2
    if config.query_mode is QueryMode.CLOSED_FORM:
        uncertainty = query_uncertainty_closed(delta, state.traj_cov, config.sigma_r)
    else:
        uncertainty = query_uncertainty_mc(
            theta_hat, config.sigma_r, state.traj_cov, delta, config.mc_samples, agent_rng
        )
    z = int(uncertainty > config.epsilon)

    traj_cov = state.traj_cov
    o = None
    if z:
        o = int(oracle(tau0, tau1))
        traj_cov = rank_one_update(traj_cov, delta)
    preferences = state.preferences.add(phi1 - phi0, o if o is not None else 0, z)

    step_covs = tuple(
        rank_one_update(cov, env.features[s, a])
        for cov, s, a in zip(state.step_covs, tau0.states, tau0.actions)
    )
    counts = state.transition_counts.copy()
    for h, (s, a, s_next) in enumerate(tau0.transitions()):
        counts[h, s, a, s_next] += 1

    new_state = replace(
        state,
        t=state.t + 1,
        traj_cov=traj_cov,
        step_covs=step_covs,
        preferences=preferences,
        transition_counts=counts,
        prev_policy=pi0,
        theta_hat=theta_hat,
        rng=agent_rng,
    )
    record = EpisodeRecord(state.t, z, o, float(uncertainty), pi0, pi1, tau0, tau1, float(potential))
    return new_state, record


# ---------------------------------------------------------------------------
# Theory-mode constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoryConstants:
    eps_xi_r: float
    eps_eta_r: float
    v_max: float
    eps_lambda: float
    eps_xi_p: float
    iota_eps: float
    chi: float
    eps_eta_p: float
    eps_eta_p_prime: float
    sigma_r: float
    sigma_p: float
    alpha_u: float
    alpha_l: float
    ridge_lambda: float
    l_max: float
    iterations: int
    chi_trajectory: tuple[float, ...]

    @property
    def chi_condition_holds(self) -> bool:
        """Whether the fixed point satisfies ``eps'_eta <= eps_eta`` for the value noise."""
        return self.eps_eta_p_prime <= self.eps_eta_p


def theory_constants(
    d: int, horizon: int, episodes: int, reward_bound: float, kappa: float, kappa_bar: float,
    delta: float = 0.05, *, max_iter: int = 100, tol: float = 1e-6,
) -> TheoryConstants:
    """Conservative hyperparameters of the regret analysis.

    ``sigma_p``, ``eps_xi_p``, ``iota_eps`` and ``eps_eta_p`` depend on each
    other through ``chi``; they are solved jointly by fixed-point iteration on
    ``chi = max(1, log(eps_xi_p + eps_eta_p + eps_lambda))`` starting at 1.
    """
    if min(d, horizon, episodes, reward_bound, kappa, kappa_bar) <= 0:
        raise ConfigurationError("all theory-mode inputs must be positive")
    if not 0 < delta < 1:
        raise ConfigurationError("delta must lie in (0, 1)")
    lam = 1.0
    T, H, B = float(episodes), float(horizon), float(reward_bound)
    log = math.log
    eps_eta_r = math.sqrt(
        80 * kappa * d * log(24 * B * T**2 / (kappa_bar * delta))
        + 168 * B**2 * d * log(6 * B * T**2 / delta)
        + 4 * lam * B**2
    )
    sigma_r = eps_eta_r
    eps_xi_r = sigma_r * math.sqrt(2 * d * log(2 * d * T / delta))
    v_max = H * (2 + (eps_xi_r + eps_eta_r) / math.sqrt(lam))
    eps_lambda = v_max * math.sqrt(lam * d)

    def noise_terms(eps_eta_p):
        sigma_p = (eps_eta_p + eps_lambda) * math.sqrt(H)
        eps_xi_p = sigma_p * math.sqrt(2 * d * log(2 * d * H * T / delta))
        iota_eps = log(
            12 * H * T**2 * (T + lam) * v_max
            * (B + (2 * v_max * math.sqrt(d * T) + eps_xi_p + eps_xi_r) / math.sqrt(lam))
        )
        return sigma_p, eps_xi_p, iota_eps

    # iota depends on eps_xi_p, which depends on eps_eta_p: both are refreshed with chi
    chi = 1.0
    eps_eta_p = 0.0
    trajectory = [chi]
    sigma_p, eps_xi_p, iota_eps = noise_terms(eps_eta_p)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eps_eta_p = chi * (6 / math.sqrt(lam) + 16 * d * v_max * math.sqrt(iota_eps - log(delta * lam)))
        sigma_p, eps_xi_p, iota_eps = noise_terms(eps_eta_p)
        new_chi = max(1.0, log(eps_xi_p + eps_eta_p + eps_lambda))
        trajectory.append(new_chi)
        if abs(new_chi - chi) < tol:
            chi = new_chi
            converged = True
            break
        chi = new_chi
    if not converged:
        raise ConfigurationError(
            f"chi fixed point did not converge in {max_iter} iterations; trajectory={trajectory}"
        )
    # final consistent pass at the converged chi
    eps_eta_p = chi * (6 / math.sqrt(lam) + 16 * d * v_max * math.sqrt(iota_eps - log(delta * lam)))
    sigma_p, eps_xi_p, iota_eps = noise_terms(eps_eta_p)
    total = eps_xi_p + eps_eta_p + eps_lambda
    alpha_u = 1.0 / total
    alpha_l = alpha_u / 2
    eps_eta_p_prime = 6 / math.sqrt(lam) + 16 * d * v_max * math.sqrt(
        iota_eps - log((alpha_u - alpha_l) * delta * lam)
    )
    l_max = 2 * d * H / alpha_l**2 * log((lam + T) / lam)
    return TheoryConstants(
        eps_xi_r=eps_xi_r, eps_eta_r=eps_eta_r, v_max=v_max, eps_lambda=eps_lambda,
        eps_xi_p=eps_xi_p, iota_eps=iota_eps, chi=chi, eps_eta_p=eps_eta_p,
        eps_eta_p_prime=eps_eta_p_prime, sigma_r=sigma_r, sigma_p=sigma_p,
        alpha_u=alpha_u, alpha_l=alpha_l, ridge_lambda=lam, l_max=l_max,
        iterations=it, chi_trajectory=tuple(trajectory),
    )


def theory_hyperparams(
    d: int, horizon: int, episodes: int, reward_bound: float, kappa: float, kappa_bar: float,
    delta: float = 0.05, **overrides,
) -> PrLsviConfig:
    c = theory_constants(d, horizon, episodes, reward_bound, kappa, kappa_bar, delta)
    params = dict(
        sigma_r=c.sigma_r, sigma_p=c.sigma_p, alpha_l=c.alpha_l, alpha_u=c.alpha_u,
        ridge_lambda=c.ridge_lambda, reward_bound=reward_bound, mode="theory",
    )
    params.update(overrides)
    return PrLsviConfig(**params)
