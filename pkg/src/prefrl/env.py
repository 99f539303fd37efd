"""Finite-horizon environments, policies, exact dynamic programming and the
Bernoulli preference oracle.

Both environment types expose the same tabular view used by the planners:
``n_states``, ``n_actions``, ``horizon``, ``initial_state``, a transition
tensor ``transitions[s, a, s']`` and a reward table ``rewards[s, a]``.  For a
:class:`LinearMdp` the tabular view is derived from the features, the latent
next-state measure and the reward parameter.

Steps are 0-indexed in code: step ``h`` runs from ``0`` to ``horizon - 1``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

ROW_SUM_TOL = 1e-12


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _check_kernel(transitions: np.ndarray) -> None:
    if np.any(transitions < 0):
        raise ValueError("transition probabilities must be non-negative")
    sums = transitions.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > ROW_SUM_TOL:
        raise ValueError(f"transition rows must sum to 1 (worst deviation {worst:.3e})")


def _sampling_cdf(transitions: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(transitions, axis=-1)
    cdf /= cdf[..., -1:]
    cdf[..., -1] = 1.0
    return cdf


# ---------------------------------------------------------------------------
# Link functions
# ---------------------------------------------------------------------------


class LinkKind(str, Enum):
    BTL = "btl"
    AFFINE = "affine"


@dataclass(frozen=True)
class LinkFunction:
    """Monotone map from a reward difference to a preference probability.

    ``BTL`` is the logistic sigmoid.  ``AFFINE`` is ``(x / w + 1) / 2`` on the
    interval ``[-w, w]`` (``w = half_width``); arguments outside the interval
    raise ``ValueError``.
    """

    kind: LinkKind = LinkKind.BTL
    half_width: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LinkKind(self.kind))
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")

    @classmethod
    def btl(cls) -> "LinkFunction":
        return cls(LinkKind.BTL)

    @classmethod
    def affine(cls, half_width: float = 1.0) -> "LinkFunction":
        return cls(LinkKind.AFFINE, half_width)

    def check_domain(self, x) -> None:
        if self.kind is LinkKind.AFFINE:
            x = np.asarray(x, dtype=float)
            if x.size and float(np.max(np.abs(x))) > self.half_width:
                raise ValueError(
                    f"affine link evaluated outside [-{self.half_width}, {self.half_width}]: "
                    f"max |x| = {float(np.max(np.abs(x))):.6g}"
                )

    def __call__(self, x):
        if self.kind is LinkKind.BTL:
            return expit(x)
        self.check_domain(x)
        return (np.asarray(x, dtype=float) / self.half_width + 1.0) / 2.0

    def derivative(self, x):
        if self.kind is LinkKind.BTL:
            return expit(x) * expit(-np.asarray(x, dtype=float))
        self.check_domain(x)
        return np.full_like(np.asarray(x, dtype=float), 0.5 / self.half_width)

    def log_prob(self, x):
        """``ln Phi(x)``, stable for large ``|x|`` under the BTL link."""
        x = np.asarray(x, dtype=float)
        if self.kind is LinkKind.BTL:
            return -np.logaddexp(0.0, -x)
        with np.errstate(divide="ignore"):
            return np.log(self(x))

    def score(self, x):
        """``Phi'(x) / Phi(x)``, the derivative of :meth:`log_prob`."""
        x = np.asarray(x, dtype=float)
        if self.kind is LinkKind.BTL:
            return expit(-x)
        with np.errstate(divide="ignore"):
            return self.derivative(x) / self(x)

    def constants(self, horizon: int) -> tuple[float, float]:
        return link_constants(self, horizon)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "half_width": self.half_width}


def link_constants(link: LinkFunction, horizon: int) -> tuple[float, float]:
    """Derivative bounds ``(kappa, kappa_bar)`` with ``1/kappa <= Phi' <= 1/kappa_bar``.

    For BTL the bound is taken over reward differences in ``[-H, H]``.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if link.kind is LinkKind.BTL:
        return 2.0 + math.exp(-horizon) + math.exp(horizon), 4.0
    return 2.0 * link.half_width, 2.0 * link.half_width


# ---------------------------------------------------------------------------
# Policies and trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Policy:
    """Deterministic non-stationary policy; ``actions[h, s]`` is the action at step ``h``."""

    actions: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.actions)
        if table.ndim != 2:
            raise ValueError("policy table must have shape (horizon, n_states)")
        if table.size and (table.min() < 0):
            raise ValueError("policy actions must be non-negative")
        object.__setattr__(self, "actions", _frozen(table, dtype=np.int64))

    @classmethod
    def constant(cls, horizon: int, n_states: int, action: int = 0) -> "Policy":
        return cls(np.full((horizon, n_states), action, dtype=np.int64))

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def n_states(self) -> int:
        return self.actions.shape[1]

    def __call__(self, h: int, s: int) -> int:
        return int(self.actions[h, s])

    def __eq__(self, other) -> bool:
        return isinstance(other, Policy) and np.array_equal(self.actions, other.actions)

    def __hash__(self) -> int:
        return hash(self.actions.tobytes())

    def digest(self) -> str:
        """Short stable hash of the action table, used in episode records."""
        return hashlib.sha256(self.actions.tobytes()).hexdigest()[:16]

    def validate(self, env) -> None:
        if self.actions.shape != (env.horizon, env.n_states):
            raise ValueError(
                f"policy shape {self.actions.shape} does not match "
                f"(horizon, n_states) = {(env.horizon, env.n_states)}"
            )
        if self.actions.max(initial=0) >= env.n_actions:
            raise ValueError("policy uses an action index outside the action set")


@dataclass(frozen=True)
class Trajectory:
    """The visited ``(state, action)`` pairs of one episode, in order."""

    states: tuple[int, ...]
    actions: tuple[int, ...]

    def __post_init__(self):
        if len(self.states) != len(self.actions):
            raise ValueError("states and actions must have equal length")

    @property
    def steps(self) -> list[tuple[int, int]]:
        return list(zip(self.states, self.actions))

    def __len__(self) -> int:
        return len(self.states)

    def transitions(self) -> list[tuple[int, int, int]]:
        """Observed ``(s_h, a_h, s_{h+1})`` triples, ``H - 1`` of them."""
        return [
            (self.states[h], self.actions[h], self.states[h + 1])
            for h in range(len(self.states) - 1)
        ]


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transitions: np.ndarray
    rewards: np.ndarray
    horizon: int
    initial_state: int = 0
    provenance: dict = field(default_factory=dict)

    kind = "tabular"

    def __post_init__(self):
        P = _frozen(self.transitions)
        r = _frozen(self.rewards)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transitions must have shape (n_states, n_actions, n_states)")
        if r.shape != P.shape[:2]:
            raise ValueError("rewards must have shape (n_states, n_actions)")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 0 <= self.initial_state < P.shape[0]:
            raise ValueError("initial_state out of range")
        _check_kernel(P)
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("rewards must lie in [0, 1]")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @cached_property
    def _cdf(self) -> np.ndarray:
        return _sampling_cdf(self.transitions)

    def to_dict(self) -> dict:
        return {
            "kind": "tabular",
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "horizon": self.horizon,
            "initial_state": self.initial_state,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "provenance": dict(self.provenance),
        }


@dataclass(frozen=True, eq=False)
class LinearMdp:
    """Linear MDP over finite state and action sets.

    ``features[s, a]`` is the feature vector, ``mu[k]`` the (scaled) measure over
    next states attached to latent coordinate ``k`` and ``theta`` the reward
    parameter, so ``P(s'|s,a) = features[s, a] @ mu[:, s']`` and
    ``r(s, a) = features[s, a] @ theta``.
    """

    features: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    reward_bound: float
    horizon: int
    feature_scale: float = 1.0
    initial_state: int = 0
    provenance: dict = field(default_factory=dict)

    kind = "linear"

    def __post_init__(self):
        phi = _frozen(self.features)
        mu = _frozen(self.mu)
        theta = _frozen(self.theta)
        if phi.ndim != 3:
            raise ValueError("features must have shape (n_states, n_actions, d)")
        S, _, d = phi.shape
        if mu.shape != (d, S):
            raise ValueError(f"mu must have shape (d, n_states) = {(d, S)}")
        if theta.shape != (d,):
            raise ValueError(f"theta must have shape ({d},)")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 0 <= self.initial_state < S:
            raise ValueError("initial_state out of range")
        norms = np.linalg.norm(phi, axis=-1)
        if norms.max() > 1 + 1e-12:
            raise ValueError("feature norms must not exceed 1")
        # sufficient condition for ||phi(tau)|| <= 1 on every trajectory
        if self.horizon * norms.max() > 1 + 1e-12:
            raise ValueError("horizon * max feature norm must not exceed 1")
        if np.linalg.norm(theta) > self.reward_bound * (1 + 1e-12):
            raise ValueError("reward parameter norm exceeds reward_bound")
        object.__setattr__(self, "features", phi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "theta", theta)
        _check_kernel(self.transitions)
        r = self.rewards
        if np.any(r < -1e-12) or np.any(r > 1 + 1e-12):
            raise ValueError("induced rewards must lie in [0, 1]")

    @property
    def n_states(self) -> int:
        return self.features.shape[0]

    @property
    def n_actions(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @cached_property
    def transitions(self) -> np.ndarray:
        return _frozen(self.features @ self.mu)

    @cached_property
    def rewards(self) -> np.ndarray:
        return _frozen(self.features @ self.theta)

    @cached_property
    def _cdf(self) -> np.ndarray:
        return _sampling_cdf(np.clip(self.transitions, 0.0, None))

    def feature(self, s: int, a: int) -> np.ndarray:
        return self.features[s, a]

    def to_dict(self) -> dict:
        return {
            "kind": "linear",
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "horizon": self.horizon,
            "dim": self.dim,
            "initial_state": self.initial_state,
            "features": self.features.tolist(),
            "mu": self.mu.tolist(),
            "theta": self.theta.tolist(),
            "reward_bound": self.reward_bound,
            "feature_scale": self.feature_scale,
            "provenance": dict(self.provenance),
        }


Environment = TabularMdp | LinearMdp


def env_from_dict(doc: dict) -> Environment:
    kind = doc.get("kind")
    if kind == "tabular":
        return TabularMdp(
            transitions=np.array(doc["transitions"], dtype=float),
            rewards=np.array(doc["rewards"], dtype=float),
            horizon=int(doc["horizon"]),
            initial_state=int(doc.get("initial_state", 0)),
            provenance=dict(doc.get("provenance", {})),
        )
    if kind == "linear":
        return LinearMdp(
            features=np.array(doc["features"], dtype=float),
            mu=np.array(doc["mu"], dtype=float),
            theta=np.array(doc["theta"], dtype=float),
            reward_bound=float(doc["reward_bound"]),
            horizon=int(doc["horizon"]),
            feature_scale=float(doc.get("feature_scale", 1.0)),
            initial_state=int(doc.get("initial_state", 0)),
            provenance=dict(doc.get("provenance", {})),
        )
    raise ValueError(f"unknown environment kind: {kind!r}")


def save_env(env: Environment, path: str | Path) -> None:
    Path(path).write_text(json.dumps(env.to_dict(), indent=1) + "\n")


def load_env(path: str | Path) -> Environment:
    return env_from_dict(json.loads(Path(path).read_text()))


def random_tabular_mdp(
    n_states: int, n_actions: int, horizon: int, rng=None, *, reward_scale: float = 1.0
) -> TabularMdp:
    """Transition rows from a symmetric Dirichlet(1), rewards uniform on ``[0, reward_scale]``."""
    if n_states < 1 or n_actions < 1 or horizon < 1:
        raise ValueError("n_states, n_actions and horizon must all be at least 1")
    if not 0 < reward_scale <= 1:
        raise ValueError("reward_scale must lie in (0, 1]")
    provenance = {"generator": "random_tabular_mdp"}
    if isinstance(rng, (int, np.integer)):
        provenance["seed"] = int(rng)
    gen = _as_rng(rng)
    P = gen.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = gen.uniform(0.0, 1.0, size=(n_states, n_actions)) * reward_scale
    return TabularMdp(P, r, horizon, 0, provenance)


def tabular_to_linear(mdp: TabularMdp) -> LinearMdp:
    """Embed a tabular MDP with one-hot features scaled by ``1/H``."""
    S, A, H = mdp.n_states, mdp.n_actions, mdp.horizon
    d = S * A
    features = np.eye(d).reshape(S, A, d) / H
    mu = H * mdp.transitions.reshape(d, S)
    theta = H * mdp.rewards.reshape(d)
    provenance = dict(mdp.provenance, converted_from="tabular")
    return LinearMdp(
        features=features,
        mu=mu,
        theta=theta,
        reward_bound=H * math.sqrt(d),
        horizon=H,
        feature_scale=1.0 / H,
        initial_state=mdp.initial_state,
        provenance=provenance,
    )


def random_linear_mdp(
    d: int, n_states: int, n_actions: int, horizon: int, rng=None
) -> LinearMdp:
    """Soft state aggregation: simplex features over ``d`` latent distributions."""
    if d < 1 or n_states < 1 or n_actions < 1 or horizon < 1:
        raise ValueError("d, n_states, n_actions and horizon must all be at least 1")
    provenance = {"generator": "random_linear_mdp"}
    if isinstance(rng, (int, np.integer)):
        provenance["seed"] = int(rng)
    gen = _as_rng(rng)
    raw_phi = gen.dirichlet(np.ones(d), size=(n_states, n_actions))
    raw_mu = gen.dirichlet(np.ones(n_states), size=d)
    raw_theta = gen.uniform(0.0, 1.0, size=d)
    return LinearMdp(
        features=raw_phi / horizon,
        mu=raw_mu * horizon,
        theta=raw_theta * horizon,
        reward_bound=horizon * math.sqrt(d),
        horizon=horizon,
        feature_scale=1.0 / horizon,
        initial_state=0,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Interaction
# ---------------------------------------------------------------------------


def rollout(env: Environment, policy: Policy, rng) -> Trajectory:
    """Run ``policy`` for one episode from the initial state."""
    cdf = env._cdf
    s = env.initial_state
    states, actions = [], []
    last = env.n_states - 1
    for h in range(env.horizon):
        a = int(policy.actions[h, s])
        states.append(s)
        actions.append(a)
        if h < env.horizon - 1:
            s = min(int(np.searchsorted(cdf[s, a], rng.random(), side="right")), last)
    return Trajectory(tuple(states), tuple(actions))


def trajectory_feature(env: LinearMdp, traj: Trajectory) -> np.ndarray:
    if len(traj) != env.horizon:
        raise ValueError("trajectory length must equal the horizon")
    return env.features[list(traj.states), list(traj.actions)].sum(axis=0)


def trajectory_reward(rewards: np.ndarray, traj: Trajectory) -> float:
    return float(np.asarray(rewards)[list(traj.states), list(traj.actions)].sum())


def preference_probability(link: LinkFunction, env: Environment, tau0, tau1) -> float:
    """Probability that ``tau1`` is preferred over ``tau0``."""
    gap = trajectory_reward(env.rewards, tau1) - trajectory_reward(env.rewards, tau0)
    return float(link(gap))


def preference_sample(link: LinkFunction, env: Environment, tau0, tau1, rng) -> int:
    """Draw ``o`` in ``{0, 1}``; ``o = 1`` means ``tau1`` is preferred."""
    p = preference_probability(link, env, tau0, tau1)
    return int(rng.random() < p)


@dataclass
class PreferenceOracle:
    """Simulated annotator comparing two trajectories under the true reward."""

    link: LinkFunction
    env: Environment
    rng: np.random.Generator

    def __call__(self, tau0: Trajectory, tau1: Trajectory) -> int:
        return preference_sample(self.link, self.env, tau0, tau1, self.rng)


# ---------------------------------------------------------------------------
# Exact dynamic programming
# ---------------------------------------------------------------------------


def _reward_table(env: Environment, reward) -> np.ndarray:
    if reward is None:
        return env.rewards
    reward = np.asarray(reward, dtype=float)
    if reward.shape == (env.n_states, env.n_actions):
        return reward
    if isinstance(env, LinearMdp) and reward.shape == (env.dim,):
        return env.features @ reward
    raise ValueError(f"reward of shape {reward.shape} does not fit the environment")


def solve_finite_horizon(
    transitions: np.ndarray, rewards: np.ndarray, horizon: int
) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction.  Returns ``(values[h, s], actions[h, s])``, ``values`` with ``H + 1`` rows."""
    S = transitions.shape[0]
    values = np.zeros((horizon + 1, S))
    actions = np.zeros((horizon, S), dtype=np.int64)
    for h in range(horizon - 1, -1, -1):
        q = rewards + transitions @ values[h + 1]
        # np.argmax returns the first maximiser, i.e. ties go to the lowest action
        actions[h] = np.argmax(q, axis=1)
        values[h] = q[np.arange(S), actions[h]]
    return values, actions


def evaluate_policy(
    transitions: np.ndarray, rewards: np.ndarray, policy: Policy
) -> np.ndarray:
    """Values ``V^pi_h(s)`` for every step, shape ``(H + 1, S)``."""
    H, S = policy.actions.shape
    values = np.zeros((H + 1, S))
    idx = np.arange(S)
    for h in range(H - 1, -1, -1):
        a = policy.actions[h]
        values[h] = rewards[idx, a] + transitions[idx, a] @ values[h + 1]
    return values


def exact_policy_value(
    env: Environment, reward=None, policy: Policy | None = None, transitions=None
) -> float:
    """``V^pi(s1)`` by backward recursion under the stored (or supplied) kernel."""
    if policy is None:
        raise ValueError("policy is required")
    policy.validate(env)
    P = env.transitions if transitions is None else np.asarray(transitions, dtype=float)
    values = evaluate_policy(P, _reward_table(env, reward), policy)
    return float(values[0, env.initial_state])


def optimal_value_and_policy(
    env: Environment, reward=None, transitions=None
) -> tuple[float, Policy]:
    P = env.transitions if transitions is None else np.asarray(transitions, dtype=float)
    values, actions = solve_finite_horizon(P, _reward_table(env, reward), env.horizon)
    return float(values[0, env.initial_state]), Policy(actions)


def enumerate_policies(horizon: int, n_states: int, n_actions: int):
    """All deterministic step-dependent policies; only sensible for tiny instances."""
    import itertools

    for flat in itertools.product(range(n_actions), repeat=horizon * n_states):
        yield Policy(np.array(flat, dtype=np.int64).reshape(horizon, n_states))


def all_trajectories(env: Environment) -> Sequence[Trajectory]:
    """Every action/state sequence of length ``H`` starting at ``s1`` (tiny instances only)."""
    import itertools

    out = []
    S, A, H = env.n_states, env.n_actions, env.horizon
    for rest in itertools.product(range(S), repeat=H - 1):
        states = (env.initial_state, *rest)
        for acts in itertools.product(range(A), repeat=H):
            out.append(Trajectory(states, acts))
    return out


def env_summary(env: Environment) -> dict[str, Any]:
    out = {
        "kind": env.kind,
        "n_states": env.n_states,
        "n_actions": env.n_actions,
        "horizon": env.horizon,
    }
    if isinstance(env, LinearMdp):
        out["dim"] = env.dim
    return out
