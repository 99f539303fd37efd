"""Preference-based Thompson sampling for tabular MDPs.

The transition model has an independent Dirichlet posterior per ``(s, a)``,
updated only from the greedy (``tau^0``) rollouts.  The reward model is a
finite set of candidate reward tables whose log-weights accumulate the
preference log-likelihood of every queried comparison.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .env import LinkFunction, Policy, TabularMdp, Trajectory, rollout, solve_finite_horizon
from .errors import ModelMisspecificationError
from .records import EpisodeRecord

EXACT_PARTICLE_LIMIT = 512


@dataclass(frozen=True, eq=False)
class DirichletTransitionPosterior:
    counts: np.ndarray  # integer transition counts n[s, a, s']
    prior: float = 1.0

    def __post_init__(self):
        if not self.prior > 0:
            raise ValueError("prior concentration must be positive")
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, n_states: int, n_actions: int, prior: float = 1.0) -> "DirichletTransitionPosterior":
        return cls(np.zeros((n_states, n_actions, n_states), dtype=np.int64), prior)

    @property
    def concentrations(self) -> np.ndarray:
        return self.prior + self.counts

    def mean(self) -> np.ndarray:
        alpha = self.concentrations
        return alpha / alpha.sum(axis=-1, keepdims=True)

    def update(self, traj: Trajectory) -> "DirichletTransitionPosterior":
        counts = self.counts.copy()
        for s, a, s_next in traj.transitions():
            counts[s, a, s_next] += 1
        return DirichletTransitionPosterior(counts, self.prior)

    def sample(self, rng) -> np.ndarray:
        alpha = self.concentrations
        S, A, _ = alpha.shape
        P = np.empty(alpha.shape)
        for s in range(S):
            for a in range(A):
                P[s, a] = rng.dirichlet(alpha[s, a])
        return P


def particle_trajectory_rewards(particles: np.ndarray, traj: Trajectory) -> np.ndarray:
    return particles[:, list(traj.states), list(traj.actions)].sum(axis=1)


def preference_log_likelihood(link: LinkFunction, particles: np.ndarray, tau0, tau1, o: int) -> np.ndarray:
    """Per-particle ``ln(o Phi(r(tau1) - r(tau0)) + (1 - o) Phi(r(tau0) - r(tau1)))``."""
    gap = particle_trajectory_rewards(particles, tau1) - particle_trajectory_rewards(particles, tau0)
    return link.log_prob(gap if o else -gap)


@dataclass(frozen=True, eq=False)
class RewardParticlePosterior:
    particles: np.ndarray  # (J, S, A)
    log_weights: np.ndarray  # (J,), unnormalised
    link: LinkFunction

    def __post_init__(self):
        particles = np.array(self.particles, dtype=float, copy=True)
        log_w = np.array(self.log_weights, dtype=float, copy=True)
        if particles.ndim != 3 or log_w.shape != particles.shape[:1]:
            raise ValueError("particles must be (J, S, A) with one log-weight per particle")
        particles.flags.writeable = False
        log_w.flags.writeable = False
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "log_weights", log_w)

    @classmethod
    def uniform(cls, particles, link: LinkFunction) -> "RewardParticlePosterior":
        particles = np.asarray(particles, dtype=float)
        return cls(particles, np.zeros(len(particles)), link)

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    def weights(self) -> np.ndarray:
        if np.all(np.isneginf(self.log_weights)):
            raise ModelMisspecificationError(
                "every reward particle has zero likelihood; the true reward is not in the particle set"
            )
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def update(self, tau0: Trajectory, tau1: Trajectory, o: int, z: int) -> "RewardParticlePosterior":
        if not z:
            return self
        with np.errstate(divide="ignore"):
            ll = preference_log_likelihood(self.link, self.particles, tau0, tau1, o)
        return RewardParticlePosterior(self.particles, self.log_weights + ll, self.link)

    def sample_index(self, rng) -> int:
        cdf = np.cumsum(self.weights())
        cdf[-1] = 1.0
        return int(np.searchsorted(cdf, rng.random(), side="right"))


def update_transition_posterior(post: DirichletTransitionPosterior, tau0: Trajectory) -> DirichletTransitionPosterior:
    return post.update(tau0)


def update_reward_posterior(
    post: RewardParticlePosterior, tau0: Trajectory, tau1: Trajectory, o: int, z: int
) -> RewardParticlePosterior:
    return post.update(tau0, tau1, o, z)


def pbts_query_uncertainty(
    post: RewardParticlePosterior, tau0: Trajectory, tau1: Trajectory, rng=None, *, mc_pairs: int = 100_000
) -> float:
    """``E_{r, r'}|(r(tau0) - r(tau1)) - (r'(tau0) - r'(tau1))|`` under the particle posterior.

    Exact double sum over particle pairs up to 512 particles, Monte Carlo over
    ``mc_pairs`` sampled pairs beyond that.
    """
    w = post.weights()
    gaps = particle_trajectory_rewards(post.particles, tau0) - particle_trajectory_rewards(post.particles, tau1)
    if post.n_particles <= EXACT_PARTICLE_LIMIT:
        return float(w @ np.abs(gaps[:, None] - gaps[None, :]) @ w)
    if rng is None:
        raise ValueError("an rng is required above the exact particle limit")
    i = rng.choice(post.n_particles, size=mc_pairs, p=w)
    j = rng.choice(post.n_particles, size=mc_pairs, p=w)
    return float(np.mean(np.abs(gaps[i] - gaps[j])))


def plan_value_iteration(transitions, rewards, horizon: int, initial_state: int = 0) -> tuple[Policy, float]:
    values, actions = solve_finite_horizon(np.asarray(transitions), np.asarray(rewards), horizon)
    return Policy(actions), float(values[0, initial_state])


@dataclass(frozen=True)
class PbtsState:
    transitions: DirichletTransitionPosterior
    rewards: RewardParticlePosterior
    prev_policy: Policy
    t: int
    rng: np.random.Generator


def default_particles(env: TabularMdp, n_particles: int, rng, reward_scale: float = 1.0) -> tuple[np.ndarray, int]:
    """The true reward table placed at a uniformly random slot among ``J - 1`` uniform tables."""
    if n_particles < 1:
        raise ValueError("need at least one particle")
    others = rng.uniform(0.0, 1.0, size=(n_particles - 1, env.n_states, env.n_actions)) * reward_scale
    slot = int(rng.integers(n_particles))
    particles = np.insert(others, slot, env.rewards, axis=0)
    return particles, slot


def init_state(
    env: TabularMdp,
    particles,
    link: LinkFunction,
    rng,
    prior: float = 1.0,
    initial_policy: Policy | None = None,
) -> PbtsState:
    if initial_policy is None:
        initial_policy = Policy.constant(env.horizon, env.n_states, 0)
    initial_policy.validate(env)
    return PbtsState(
        transitions=DirichletTransitionPosterior.empty(env.n_states, env.n_actions, prior),
        rewards=RewardParticlePosterior.uniform(particles, link),
        prev_policy=initial_policy,
        t=1,
        rng=rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng),
    )


def sample_posterior_mdp(state: PbtsState, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw a kernel row-by-row from the Dirichlets and one reward particle."""
    P = state.transitions.sample(rng)
    j = state.rewards.sample_index(rng)
    return P, state.rewards.particles[j]


def pbts_episode(
    state: PbtsState, env: TabularMdp, oracle, epsilon: float, rng
) -> tuple[PbtsState, EpisodeRecord]:
    """One episode.  ``state.rng`` drives posterior sampling, ``rng`` the rollouts."""
    agent_rng = copy.deepcopy(state.rng)
    P, r = sample_posterior_mdp(state, agent_rng)
    pi0, _ = plan_value_iteration(P, r, env.horizon, env.initial_state)
    pi1 = state.prev_policy
    tau0 = rollout(env, pi0, rng)
    tau1 = rollout(env, pi1, rng)
    uncertainty = pbts_query_uncertainty(state.rewards, tau0, tau1, agent_rng)
    z = int(uncertainty > epsilon)
    o = int(oracle(tau0, tau1)) if z else None
    rewards = state.rewards.update(tau0, tau1, o if z else 0, z)
    transitions = state.transitions.update(tau0)
    new_state = replace(
        state, transitions=transitions, rewards=rewards, prev_policy=pi0, t=state.t + 1, rng=agent_rng
    )
    return new_state, EpisodeRecord(state.t, z, o, float(uncertainty), pi0, pi1, tau0, tau1)


def posterior_snapshot(state: PbtsState) -> dict:
    return {
        "t": state.t,
        "prior_concentration": state.transitions.prior,
        "concentrations": state.transitions.concentrations.tolist(),
        "weights": state.rewards.weights().tolist(),
    }
