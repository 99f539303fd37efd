"""Seeded experiment runs: exact regret, query counts, beta sweeps and CSV/JSON output."""

from __future__ import annotations

import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Protocol

import numpy as np

from . import pbts, pr_lsvi
from .env import (
    LinearMdp,
    LinkFunction,
    Policy,
    PreferenceOracle,
    TabularMdp,
    env_summary,
    evaluate_policy,
    optimal_value_and_policy,
    random_linear_mdp,
    random_tabular_mdp,
    rollout,
    tabular_to_linear,
)
from .errors import ConfigurationError, NumericalError
from .records import EpisodeRecord

CSV_HEADER = "run_id,t,regret_inc,regret_cum,Z,queries_cum\n"
REGRET_FLOOR = -1e-9


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "tabular"
    n_states: int = 4
    n_actions: int = 2
    horizon: int = 3
    dim: int | None = None
    seed: int | None = None  # fixed environment; None draws one per run seed
    reward_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("tabular", "linear"):
            raise ConfigurationError(f"unknown environment kind {self.kind!r}")
        if min(self.n_states, self.n_actions, self.horizon) < 1:
            raise ConfigurationError("environment sizes must be at least 1")
        if self.kind == "linear" and (self.dim is None or self.dim < 1):
            raise ConfigurationError("linear environments need dim >= 1")
        if not 0 < self.reward_scale <= 1:
            raise ConfigurationError("reward_scale must lie in (0, 1]")
        if self.kind == "linear" and self.reward_scale != 1:
            raise ConfigurationError("reward_scale is only supported for tabular environments")


@dataclass(frozen=True)
class PbtsConfig:
    epsilon: float = 0.1
    n_particles: int = 32
    prior_concentration: float = 1.0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigurationError("epsilon must be non-negative")
        if self.n_particles < 1:
            raise ConfigurationError("n_particles must be at least 1")
        if not self.prior_concentration > 0:
            raise ConfigurationError("prior_concentration must be positive")


AGENTS = ("pr_lsvi", "pbts", "random")


@dataclass(frozen=True)
class RunConfig:
    agent: str = "pr_lsvi"
    environment: EnvSpec = field(default_factory=EnvSpec)
    episodes: int = 100
    seed: int = 0
    beta: float | None = None
    link: LinkFunction = field(default_factory=LinkFunction.btl)
    pr_lsvi: pr_lsvi.PrLsviConfig = field(default_factory=pr_lsvi.PrLsviConfig)
    pbts: PbtsConfig = field(default_factory=PbtsConfig)
    theory_delta: float = 0.05

    def __post_init__(self):
        if self.agent not in AGENTS:
            raise ConfigurationError(f"unknown agent {self.agent!r}; expected one of {AGENTS}")
        if self.episodes < 1:
            raise ConfigurationError("episodes must be at least 1")
        if self.beta is not None and not 0 <= self.beta <= 0.5:
            raise ConfigurationError(f"beta must lie in [0, 0.5], got {self.beta}")
        if self.agent == "pbts" and self.environment.kind != "tabular":
            raise ConfigurationError("PbTS requires a tabular environment")
        if not 0 < self.theory_delta < 1:
            raise ConfigurationError("theory_delta must lie in (0, 1)")

    @property
    def epsilon(self) -> float:
        if self.beta is not None:
            return float(self.episodes) ** (-self.beta)
        return self.pbts.epsilon if self.agent == "pbts" else self.pr_lsvi.epsilon

    @property
    def run_id(self) -> str:
        if self.beta is None:
            return f"seed{self.seed}"
        return f"beta{self.beta:g}-seed{self.seed}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["link"] = self.link.to_dict()
        out["pr_lsvi"]["link"] = self.pr_lsvi.link.to_dict()
        out["pr_lsvi"]["query_mode"] = self.pr_lsvi.query_mode.value
        out["epsilon_effective"] = self.epsilon
        return out


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------


class Agent(Protocol):
    def play(self, env, oracle, rng) -> EpisodeRecord: ...


class PrLsviAgent:
    def __init__(self, env: LinearMdp, config: pr_lsvi.PrLsviConfig, rng):
        self.config = config
        self.state = pr_lsvi.init_state(env, config, rng)

    def play(self, env, oracle, rng) -> EpisodeRecord:
        self.state, record = pr_lsvi.pr_lsvi_episode(self.state, env, oracle, self.config, rng)
        return record


class PbtsAgent:
    def __init__(self, env: TabularMdp, particles, link: LinkFunction, epsilon: float, prior: float, rng):
        self.epsilon = epsilon
        self.state = pbts.init_state(env, particles, link, rng, prior)

    def play(self, env, oracle, rng) -> EpisodeRecord:
        self.state, record = pbts.pbts_episode(self.state, env, oracle, self.epsilon, rng)
        return record


class RandomAgent:
    """Two fresh uniformly random deterministic policies per episode; never queries."""

    def __init__(self, env, rng):
        self.rng = rng
        self.t = 1

    def play(self, env, oracle, rng) -> EpisodeRecord:
        shape = (env.horizon, env.n_states)
        pi0 = Policy(self.rng.integers(env.n_actions, size=shape))
        pi1 = Policy(self.rng.integers(env.n_actions, size=shape))
        tau0 = rollout(env, pi0, rng)
        tau1 = rollout(env, pi1, rng)
        record = EpisodeRecord(self.t, 0, None, 0.0, pi0, pi1, tau0, tau1)
        self.t += 1
        return record


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class RunMetrics:
    run_id: str
    seed: int
    regret_increments: np.ndarray
    cumulative_regret: np.ndarray
    z: np.ndarray
    cumulative_queries: np.ndarray
    records: list[EpisodeRecord]
    checks: dict[str, bool]
    optimal_value: float
    epsilon: float
    beta: float | None = None
    wall_clock: float = 0.0
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def episodes(self) -> int:
        return len(self.regret_increments)

    @property
    def final_regret(self) -> float:
        return float(self.cumulative_regret[-1])

    @property
    def total_queries(self) -> int:
        return int(self.cumulative_queries[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER)
        self.write_rows(buf)
        return buf.getvalue()

    def write_rows(self, buf) -> None:
        for t in range(self.episodes):
            buf.write(
                f"{self.run_id},{t + 1},{float(self.regret_increments[t])!r},"
                f"{float(self.cumulative_regret[t])!r},{int(self.z[t])},{int(self.cumulative_queries[t])}\n"
            )

    def records_jsonl(self) -> str:
        return "".join(json.dumps(rec.to_json_dict()) + "\n" for rec in self.records)

    def summary(self) -> dict:
        half = self.episodes // 2
        inc = self.regret_increments
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "beta": self.beta,
            "epsilon": self.epsilon,
            "episodes": self.episodes,
            "final_regret": self.final_regret,
            "total_queries": self.total_queries,
            "optimal_value": self.optimal_value,
            "mean_regret_first_half": float(inc[:half].mean()) if half else None,
            "mean_regret_second_half": float(inc[half:].mean()),
            "checks": dict(self.checks),
            **self.extras,
        }


def _policy_value_cache(env):
    cache: dict[bytes, float] = {}

    def value(policy: Policy) -> float:
        key = policy.actions.tobytes()
        if key not in cache:
            cache[key] = float(evaluate_policy(env.transitions, env.rewards, policy)[0, env.initial_state])
        return cache[key]

    return value


def elliptical_potential_bound(dim: int, ridge_lambda: float, episodes: int) -> float:
    # ||phi(tau0) - phi(tau1)|| <= 2, so the squared-norm bound L^2 is 4
    return 2 * dim * math.log((ridge_lambda + 4 * episodes) / ridge_lambda)


def execute(agent: Agent, env, oracle, episodes: int, rollout_rng, *, run_id: str = "run", seed: int = 0,
            epsilon: float = math.nan, beta: float | None = None) -> RunMetrics:
    """Play ``episodes`` episodes and score them with exact dynamic-programming values."""
    start = time.perf_counter()
    v_star, _ = optimal_value_and_policy(env)
    value = _policy_value_cache(env)
    records = []
    increments = np.empty(episodes)
    for i in range(episodes):
        rec = agent.play(env, oracle, rollout_rng)
        inc = 2 * v_star - value(rec.policy0) - value(rec.policy1)
        if inc < REGRET_FLOOR:
            raise NumericalError(f"negative regret increment {inc} at episode {rec.t}")
        increments[i] = inc
        records.append(replace(rec, regret_increment=float(inc)))
    z = np.array([rec.z for rec in records], dtype=np.int64)
    cum = np.cumsum(increments)
    cum_q = np.cumsum(z)
    checks = {
        "series_lengths": len(increments) == len(z) == episodes,
        "prefix_sums": bool(np.allclose(np.cumsum(increments), cum, rtol=0, atol=1e-12)),
        "queries_are_sum_of_z": int(cum_q[-1]) == int(z.sum()),
    }
    lagged = all(records[i].policy1 == records[i - 1].policy0 for i in range(1, len(records)))
    if not isinstance(agent, RandomAgent):
        checks["comparator_lag"] = lagged
        gaps0 = np.array([v_star - value(rec.policy0) for rec in records])
        pi_init_gap = v_star - value(records[0].policy1)
        telescoped = pi_init_gap - gaps0[-1] + 2 * gaps0.sum()
        checks["regret_telescoping"] = bool(abs(telescoped - cum[-1]) <= 1e-9 * max(1.0, abs(cum[-1])))
    return RunMetrics(
        run_id=run_id, seed=seed, regret_increments=increments, cumulative_regret=cum, z=z,
        cumulative_queries=cum_q, records=records, checks=checks, optimal_value=v_star,
        epsilon=epsilon, beta=beta, wall_clock=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def _streams(seed: int):
    env_ss, agent_ss, rollout_ss, oracle_ss, particle_ss = np.random.SeedSequence(seed).spawn(5)
    return env_ss, agent_ss, rollout_ss, oracle_ss, particle_ss


def build_environment(spec: EnvSpec, seed: int):
    rng = np.random.default_rng(spec.seed if spec.seed is not None else _streams(seed)[0])
    if spec.kind == "tabular":
        env = random_tabular_mdp(spec.n_states, spec.n_actions, spec.horizon, rng, reward_scale=spec.reward_scale)
    else:
        env = random_linear_mdp(spec.dim, spec.n_states, spec.n_actions, spec.horizon, rng)
    provenance = dict(env.provenance, seed=spec.seed if spec.seed is not None else seed,
                      seed_role="environment" if spec.seed is not None else "run")
    return replace(env, provenance=provenance)


def resolve_pr_lsvi_config(config: RunConfig, env: LinearMdp) -> pr_lsvi.PrLsviConfig:
    base = replace(config.pr_lsvi, epsilon=config.epsilon, link=config.link)
    if base.mode != "theory":
        return base
    kappa, kappa_bar = config.link.constants(env.horizon)
    bound = base.reward_bound if base.reward_bound is not None else env.reward_bound
    return pr_lsvi.theory_hyperparams(
        env.dim, env.horizon, config.episodes, bound, kappa, kappa_bar, config.theory_delta,
        epsilon=config.epsilon, link=config.link, query_mode=base.query_mode, mc_samples=base.mc_samples,
    )


def run(config: RunConfig) -> RunMetrics:
    """Execute one configured run; fully determined by ``config`` (including its seed)."""
    _, agent_ss, rollout_ss, oracle_ss, particle_ss = _streams(config.seed)
    env = build_environment(config.environment, config.seed)
    extras: dict[str, Any] = {"environment": env_summary(env), "agent": config.agent}
    if config.agent == "pr_lsvi":
        if isinstance(env, TabularMdp):
            env = tabular_to_linear(env)
        agent_cfg = resolve_pr_lsvi_config(config, env)
        agent: Agent = PrLsviAgent(env, agent_cfg, np.random.default_rng(agent_ss))
        extras["pr_lsvi"] = {
            "sigma_r": agent_cfg.sigma_r, "sigma_p": agent_cfg.sigma_p,
            "alpha_l": agent_cfg.alpha_l, "alpha_u": agent_cfg.alpha_u,
            "ridge_lambda": agent_cfg.ridge_lambda, "mode": agent_cfg.mode,
        }
    elif config.agent == "pbts":
        if not isinstance(env, TabularMdp):
            raise ConfigurationError("PbTS requires a tabular environment")
        particles, slot = pbts.default_particles(
            env, config.pbts.n_particles, np.random.default_rng(particle_ss), config.environment.reward_scale
        )
        extras["true_particle"] = slot
        agent = PbtsAgent(env, particles, config.link, config.epsilon, config.pbts.prior_concentration,
                          np.random.default_rng(agent_ss))
    else:
        agent = RandomAgent(env, np.random.default_rng(agent_ss))

    oracle = PreferenceOracle(config.link, env, np.random.default_rng(oracle_ss))
    metrics = execute(agent, env, oracle, config.episodes, np.random.default_rng(rollout_ss),
                      run_id=config.run_id, seed=config.seed, epsilon=config.epsilon, beta=config.beta)
    metrics.extras.update(extras)

    if isinstance(agent, PrLsviAgent):
        _check_pr_lsvi(metrics, env, agent.config)
    if isinstance(agent, PbtsAgent):
        metrics.extras["posterior"] = pbts.posterior_snapshot(agent.state)
    return metrics


def _check_pr_lsvi(metrics: RunMetrics, env: LinearMdp, cfg: pr_lsvi.PrLsviConfig) -> None:
    potential = sum(min(1.0, rec.potential) for rec in metrics.records if rec.z)
    bound = elliptical_potential_bound(env.dim, cfg.ridge_lambda, metrics.episodes)
    metrics.extras["elliptical_potential"] = {"sum": potential, "bound": bound}
    metrics.checks["elliptical_potential"] = potential <= bound
    if cfg.query_mode is pr_lsvi.QueryMode.CLOSED_FORM:
        limit = cfg.epsilon * math.sqrt(math.pi) / (2 * cfg.sigma_r)
        metrics.checks["no_query_geometry"] = all(
            math.sqrt(rec.potential) <= limit * (1 + 1e-12) for rec in metrics.records if not rec.z
        )
    failed = [name for name in ("elliptical_potential", "no_query_geometry") if metrics.checks.get(name) is False]
    if failed:
        raise NumericalError(f"PR-LSVI invariant violated in run {metrics.run_id}: {failed}")


def random_baseline_run(config: RunConfig) -> RunMetrics:
    return run(replace(config, agent="random", beta=None))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list[dict]
    runs: dict[tuple[float, int], RunMetrics]

    def aggregate_csv(self) -> str:
        cols = ["beta", "epsilon", "n_seeds", "mean_final_regret", "se_final_regret",
                "mean_total_queries", "se_total_queries"]
        lines = [",".join(cols)]
        for row in self.rows:
            lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _stderr(values: np.ndarray) -> float:
    return float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0


def run_many(configs: Iterable[RunConfig], jobs: int = 1) -> list[RunMetrics]:
    configs = list(configs)
    if jobs <= 1 or len(configs) <= 1:
        return [run(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, configs))


def sweep_beta(base: RunConfig, betas: Iterable[float], seeds: Iterable[int], jobs: int = 1) -> SweepResult:
    """Run every ``(beta, seed)`` pair with ``epsilon = T^(-beta)`` and aggregate per beta."""
    betas, seeds = list(betas), list(seeds)
    if not betas:
        raise ConfigurationError("no betas to sweep")
    if not seeds:
        raise ConfigurationError("no seeds to sweep")
    configs = [replace(base, beta=float(b), seed=int(s)) for b in betas for s in seeds]
    results = run_many(configs, jobs)
    runs = {(c.beta, c.seed): m for c, m in zip(configs, results)}
    rows = []
    for b in sorted(set(float(x) for x in betas)):
        group = [runs[(b, int(s))] for s in sorted(set(seeds))]
        final = np.array([m.final_regret for m in group])
        queries = np.array([m.total_queries for m in group], dtype=float)
        rows.append({
            "beta": b,
            "epsilon": float(base.episodes) ** (-b),
            "n_seeds": len(group),
            "mean_final_regret": float(final.mean()),
            "se_final_regret": _stderr(final),
            "mean_total_queries": float(queries.mean()),
            "se_total_queries": _stderr(queries),
            "per_seed": [{"seed": m.seed, "final_regret": m.final_regret, "total_queries": m.total_queries}
                         for m in group],
        })
    return SweepResult(rows, runs)
