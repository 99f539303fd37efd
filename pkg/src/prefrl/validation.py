"""Quick invariant suites run by ``prefrl validate``.

Each suite returns a list of :class:`Check` results and is cheap enough to run
on every invocation (a few seconds in total).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import linalg, pbts, pr_lsvi, reward_mle
from .config import parse_config
from .env import (
    LinkFunction,
    Policy,
    PreferenceOracle,
    enumerate_policies,
    evaluate_policy,
    optimal_value_and_policy,
    random_linear_mdp,
    random_tabular_mdp,
    rollout,
)
from .errors import ConfigurationError
from .harness import EnvSpec, RunConfig, random_baseline_run, run


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail}


def _check(name: str, passed, detail: str = "") -> Check:
    return Check(name, bool(passed), detail)


def suite_env() -> list[Check]:
    rng = np.random.default_rng(101)
    out = []
    tab = random_tabular_mdp(3, 2, 3, rng)
    out.append(_check("tabular_rows_sum_to_one", np.allclose(tab.transitions.sum(-1), 1.0, atol=1e-12)))
    lin = random_linear_mdp(4, 5, 3, 3, rng)
    out.append(_check("linear_kernel_valid", np.all(lin.transitions >= -1e-12)
                      and np.allclose(lin.transitions.sum(-1), 1.0, atol=1e-12)))
    x = np.linspace(-3, 3, 13)
    btl = LinkFunction.btl()
    aff = LinkFunction.affine()
    out.append(_check("link_symmetry", np.allclose(btl(x) + btl(-x), 1.0, atol=1e-15)
                      and np.allclose(aff(x / 3) + aff(-x / 3), 1.0, atol=1e-15)))
    small = random_tabular_mdp(2, 2, 2, rng)
    v_star, _ = optimal_value_and_policy(small)
    brute = max(float(evaluate_policy(small.transitions, small.rewards, p)[0, 0])
                for p in enumerate_policies(2, 2, 2))
    out.append(_check("planner_matches_enumeration", abs(v_star - brute) <= 1e-12, f"{v_star} vs {brute}"))
    traj = rollout(tab, Policy.constant(3, 3, 1), rng)
    out.append(_check("rollout_length", len(traj) == 3))
    return out


def suite_linalg() -> list[Check]:
    rng = np.random.default_rng(202)
    d = 5
    A = rng.normal(size=(d, d))
    M = linalg.PsdMatrix.from_matrix(A @ A.T + np.eye(d))
    x = rng.normal(size=d)
    upd = linalg.rank_one_update(M, x)
    inv = np.linalg.inv(M.matrix)
    sm = inv - np.outer(inv @ x, inv @ x) / (1 + x @ inv @ x)
    out = [_check("rank_one_vs_sherman_morrison", np.allclose(np.linalg.inv(upd.matrix), sm, atol=1e-10))]
    y = rng.normal(size=d)
    out.append(_check("mahalanobis_inverse", abs(linalg.mahalanobis(y, M) - math.sqrt(y @ inv @ y)) <= 1e-10))
    out.append(_check("mahalanobis_direct",
                      abs(linalg.mahalanobis(y, M, mode="direct") - math.sqrt(y @ M.matrix @ y)) <= 1e-10))
    out.append(_check("ridge_residual", np.allclose(M.matrix @ linalg.ridge_solve(M, y), y, atol=1e-10)))
    draws = np.stack([linalg.sample_correlated_gaussian(np.zeros(d), 2.0, M, rng) for _ in range(4000)])
    err = np.linalg.norm(np.cov(draws.T) - 2.0 * inv) / np.linalg.norm(2.0 * inv)
    out.append(_check("sampler_covariance", err < 0.1, f"relative Frobenius error {err:.3f}"))
    try:
        linalg.PsdMatrix.from_matrix(np.diag([1.0, -1.0]))
        out.append(_check("rejects_indefinite", False))
    except Exception:
        out.append(_check("rejects_indefinite", True))
    return out


def _random_dataset(rng, dim: int, n: int) -> reward_mle.PreferenceDataset:
    data = reward_mle.PreferenceDataset(dim)
    theta = rng.normal(size=dim)
    link = LinkFunction.btl()
    for _ in range(n):
        x = rng.normal(size=dim) * 0.5
        data = data.add(x, int(rng.random() < link(x @ theta)))
    return data


def suite_reward_mle() -> list[Check]:
    rng = np.random.default_rng(303)
    link = LinkFunction.btl()
    data = _random_dataset(rng, 3, 40)
    theta = rng.normal(size=3) * 0.3
    grad = reward_mle.log_likelihood_gradient(theta, data, link)
    h = 1e-6
    fd = np.array([(reward_mle.log_likelihood(theta + h * e, data, link)
                    - reward_mle.log_likelihood(theta - h * e, data, link)) / (2 * h) for e in np.eye(3)])
    out = [_check("gradient_finite_difference", np.allclose(grad, fd, atol=1e-5))]
    res = reward_mle.mle_fit_detailed(data, link, reward_mle.MleConfig(radius=2.0, max_iter=300))
    hist = np.array(res.history)
    out.append(_check("monotone_ascent", np.all(np.diff(hist) >= -1e-12)))
    out.append(_check("within_ball", np.linalg.norm(res.theta) <= 2.0 + 1e-12))
    empty = reward_mle.mle_fit(reward_mle.PreferenceDataset(3), link, reward_mle.MleConfig(radius=1.0))
    out.append(_check("empty_dataset_origin", np.all(empty == 0)))
    return out


def suite_pr_lsvi() -> list[Check]:
    rng = np.random.default_rng(404)
    d = 4
    A = rng.normal(size=(d, d))
    M = linalg.PsdMatrix.from_matrix(A @ A.T + np.eye(d))
    delta = rng.normal(size=d)
    closed = pr_lsvi.query_uncertainty_closed(delta, M, 0.7)
    mc = pr_lsvi.query_uncertainty_mc(np.zeros(d), 0.7, M, delta, 40_000, rng)
    out = [_check("closed_form_vs_monte_carlo", abs(mc - closed) <= 0.03 * closed, f"{mc:.4f} vs {closed:.4f}")]

    cap, lin = 2.0, 0.8
    lo, hi = 0.25, 0.5
    steps = [abs(pr_lsvi._omega_from_norm(np.array([a + 1e-7]), lin, lo, hi, cap)
                 - pr_lsvi._omega_from_norm(np.array([a - 1e-7]), lin, lo, hi, cap))[0] for a in (lo, hi)]
    out.append(_check("omega_continuity", max(steps) <= 1e-6, f"max jump {max(steps):.2e}"))
    over = pr_lsvi._omega_from_norm(np.array([hi + 0.1]), lin, lo, hi, cap)[0]
    out.append(_check("omega_cap_exact", over == cap))

    metrics = run(RunConfig(agent="pr_lsvi", environment=EnvSpec(n_states=3, n_actions=2, horizon=2),
                            episodes=60, seed=3, beta=0.5))
    out.append(_check("elliptical_potential", metrics.checks.get("elliptical_potential", False),
                      str(metrics.extras.get("elliptical_potential"))))
    out.append(_check("no_query_geometry", metrics.checks.get("no_query_geometry", False)))
    out.append(_check("comparator_lag", metrics.checks.get("comparator_lag", False)))
    return out


def suite_pbts() -> list[Check]:
    rng = np.random.default_rng(505)
    env = random_tabular_mdp(3, 2, 3, rng)
    link = LinkFunction.btl()
    particles, _ = pbts.default_particles(env, 8, rng)
    state = pbts.init_state(env, particles, link, np.random.default_rng(1))
    oracle = PreferenceOracle(link, env, np.random.default_rng(2))
    roll = np.random.default_rng(3)
    counts = np.zeros((3, 2, 3), dtype=np.int64)
    log_w = np.zeros(len(particles))
    for _ in range(40):
        state, rec = pbts.pbts_episode(state, env, oracle, 0.05, roll)
        for s, a, s2 in rec.traj0.transitions():
            counts[s, a, s2] += 1
        if rec.z:
            with np.errstate(divide="ignore"):
                log_w += pbts.preference_log_likelihood(link, particles, rec.traj0, rec.traj1, rec.o)
    out = [_check("dirichlet_prior_plus_counts", np.array_equal(state.transitions.concentrations, 1.0 + counts))]
    out.append(_check("particle_log_weights", np.allclose(state.rewards.log_weights, log_w, rtol=0, atol=1e-12)))
    w = state.rewards.weights()
    out.append(_check("weights_normalised", abs(w.sum() - 1.0) <= 1e-12 and np.all(w >= 0)))
    single = pbts.RewardParticlePosterior.uniform(particles[:1], link)
    tau = rollout(env, Policy.constant(3, 3, 0), roll)
    out.append(_check("single_particle_no_uncertainty", pbts.pbts_query_uncertainty(single, tau, tau) == 0.0))
    return out


def suite_harness() -> list[Check]:
    cfg = RunConfig(agent="pbts", environment=EnvSpec(n_states=3, n_actions=2, horizon=2), episodes=50,
                    seed=7, beta=0.5)
    a, b = run(cfg), run(cfg)
    out = [_check("deterministic_csv", a.to_csv() == b.to_csv())]
    out.append(_check("series_and_prefix_sums", a.checks["series_lengths"] and a.checks["prefix_sums"]))
    out.append(_check("regret_telescoping", a.checks.get("regret_telescoping", False)))
    base = random_baseline_run(replace(cfg, agent="random"))
    out.append(_check("random_baseline_never_queries", base.total_queries == 0))
    out.append(_check("regret_non_negative", bool(np.all(a.regret_increments >= -1e-9))))
    return out


def suite_config(raw: dict | None = None, error: str | None = None) -> list[Check]:
    """Check a raw config mapping; schema violations are reported, not raised."""
    if error is not None:
        return [_check("config_readable", False, error)]
    raw = raw or {}
    section = raw.get("pr_lsvi") or {}
    defaults = pr_lsvi.PrLsviConfig()
    lo, hi = section.get("alpha_l", defaults.alpha_l), section.get("alpha_u", defaults.alpha_u)
    out = [_check("alpha_order", isinstance(lo, (int, float)) and isinstance(hi, (int, float)) and 0 < lo < hi,
                  f"alpha_l={lo}, alpha_u={hi}")]
    try:
        config = parse_config(raw)
        out.append(_check("schema", True))
    except ConfigurationError as exc:
        out.append(_check("schema", False, str(exc)))
        return out
    out.append(_check("betas_in_range", all(0 <= b <= 0.5 for b in config.sweep.betas)))
    out.append(_check("seeds_present", len(config.sweep.seeds) > 0))
    return out


SUITES: dict[str, Callable[[], list[Check]]] = {
    "env": suite_env,
    "linalg": suite_linalg,
    "reward_mle": suite_reward_mle,
    "pr_lsvi": suite_pr_lsvi,
    "pbts": suite_pbts,
    "harness": suite_harness,
}


def run_all(raw_config: dict | None = None, config_error: str | None = None) -> dict:
    """Run every suite; a suite that raises is reported as a single failed check."""
    report = {"suites": [], "passed": True}
    runners = dict(SUITES)
    runners["config"] = lambda: suite_config(raw_config, config_error)
    for name, fn in runners.items():
        try:
            checks = fn()
        except Exception as exc:  # noqa: BLE001 - a crashing suite is a failing suite
            checks = [Check("suite_raised", False, f"{type(exc).__name__}: {exc}")]
        passed = all(c.passed for c in checks)
        report["suites"].append({"name": name, "passed": passed, "checks": [c.to_dict() for c in checks]})
        report["passed"] = report["passed"] and passed
    report["failures"] = [f"{s['name']}.{c['name']}" for s in report["suites"] for c in s["checks"]
                          if not c["passed"]]
    return report
