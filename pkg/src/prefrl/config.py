"""Declarative run/sweep configuration files (YAML or JSON).

The schema is strict: unknown keys and wrongly typed values are rejected before
any work starts.  See the README for the full key list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .env import LinkFunction, LinkKind
from .errors import ConfigurationError
from .harness import EnvSpec, PbtsConfig, RunConfig
from .pr_lsvi import PrLsviConfig

TOP_LEVEL_KEYS = {"agent", "episodes", "seed", "beta", "link", "environment", "pr_lsvi", "pbts",
                  "theory_delta", "sweep"}
LINK_KEYS = {"kind", "half_width"}
SWEEP_KEYS = {"betas", "seeds", "jobs"}


@dataclass(frozen=True)
class SweepSpec:
    betas: tuple[float, ...] = (0.0, 0.25, 0.5)
    seeds: tuple[int, ...] = tuple(range(10))
    jobs: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig
    sweep: SweepSpec = field(default_factory=SweepSpec)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_keys(section: str, mapping: Any, allowed: set[str]) -> dict:
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"{section}: expected a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigurationError(f"{section}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    return mapping


def _typed(section: str, key: str, value, kind: str):
    """Check a scalar against its schema type (``int``, ``float``, ``str``, ``bool``, optional with ``?``)."""
    optional = kind.endswith("?")
    kind = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigurationError(f"{section}.{key}: value is required")
    ok = {
        "int": _is_int(value),
        "float": _is_number(value),
        "str": isinstance(value, str),
        "bool": isinstance(value, bool),
    }[kind]
    if not ok:
        raise ConfigurationError(f"{section}.{key}: expected {kind}, got {value!r}")
    return float(value) if kind == "float" else value


ENV_SCHEMA = {"kind": "str", "n_states": "int", "n_actions": "int", "horizon": "int", "dim": "int?",
              "seed": "int?", "reward_scale": "float"}
PR_LSVI_SCHEMA = {"sigma_r": "float", "sigma_p": "float", "epsilon": "float", "alpha_l": "float",
                  "alpha_u": "float", "ridge_lambda": "float", "reward_bound": "float?", "query_mode": "str",
                  "mc_samples": "int", "mode": "str", "mle_max_iter": "int", "mle_tol": "float",
                  "mle_step": "float?", "mle_warm_start": "bool"}
PBTS_SCHEMA = {"epsilon": "float", "n_particles": "int", "prior_concentration": "float"}


def _section(name: str, raw, schema: dict[str, str]) -> dict:
    raw = _check_keys(name, raw if raw is not None else {}, set(schema))
    return {k: _typed(name, k, v, schema[k]) for k, v in raw.items()}


def parse_link(raw) -> LinkFunction:
    raw = _check_keys("link", raw, LINK_KEYS)
    kind = _typed("link", "kind", raw.get("kind", "btl"), "str")
    try:
        kind = LinkKind(kind)
    except ValueError:
        raise ConfigurationError(f"link.kind: expected one of {[k.value for k in LinkKind]}, got {kind!r}") from None
    half_width = _typed("link", "half_width", raw.get("half_width", 1.0), "float")
    if not half_width > 0:
        raise ConfigurationError("link.half_width must be positive")
    return LinkFunction(kind, half_width)


def parse_config(raw: dict) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a parsed mapping, enforcing the schema."""
    raw = _check_keys("config", raw if raw is not None else {}, TOP_LEVEL_KEYS)
    link = parse_link(raw.get("link", {}))
    try:
        env = EnvSpec(**_section("environment", raw.get("environment"), ENV_SCHEMA))
        pr = _section("pr_lsvi", raw.get("pr_lsvi"), PR_LSVI_SCHEMA)
        pr_cfg = PrLsviConfig(link=link, **pr)
        pbts_cfg = PbtsConfig(**_section("pbts", raw.get("pbts"), PBTS_SCHEMA))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from exc
    top = {
        "agent": _typed("config", "agent", raw.get("agent", "pr_lsvi"), "str"),
        "episodes": _typed("config", "episodes", raw.get("episodes", 100), "int"),
        "seed": _typed("config", "seed", raw.get("seed", 0), "int"),
        "beta": _typed("config", "beta", raw.get("beta"), "float?"),
        "theory_delta": _typed("config", "theory_delta", raw.get("theory_delta", 0.05), "float"),
    }
    run = RunConfig(environment=env, link=link, pr_lsvi=pr_cfg, pbts=pbts_cfg, **top)

    sweep_raw = _check_keys("sweep", raw.get("sweep") or {}, SWEEP_KEYS)
    sweep = SweepSpec()
    if "betas" in sweep_raw:
        betas = sweep_raw["betas"]
        if not isinstance(betas, list) or not all(_is_number(b) for b in betas):
            raise ConfigurationError("sweep.betas: expected a list of numbers")
        sweep = SweepSpec(tuple(float(b) for b in betas), sweep.seeds, sweep.jobs)
    if "seeds" in sweep_raw:
        seeds = sweep_raw["seeds"]
        if not isinstance(seeds, list) or not all(_is_int(s) for s in seeds):
            raise ConfigurationError("sweep.seeds: expected a list of integers")
        sweep = SweepSpec(sweep.betas, tuple(seeds), sweep.jobs)
    if "jobs" in sweep_raw:
        jobs = _typed("sweep", "jobs", sweep_raw["jobs"], "int")
        if jobs < 1:
            raise ConfigurationError("sweep.jobs must be at least 1")
        sweep = SweepSpec(sweep.betas, sweep.seeds, jobs)
    for b in sweep.betas:
        if not 0 <= b <= 0.5:
            raise ConfigurationError(f"sweep.betas: beta must lie in [0, 0.5], got {b}")
    return ExperimentConfig(run, sweep)


def read_raw_config(path) -> dict:
    """Read a ``.json`` file as JSON and anything else as YAML, without schema checks."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot parse config file {path}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must contain a mapping at the top level")
    return raw


def load_config(path) -> ExperimentConfig:
    return parse_config(read_raw_config(path))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Inverse of :func:`parse_config` up to defaults."""
    run = cfg.run
    pr = {f.name: getattr(run.pr_lsvi, f.name) for f in fields(run.pr_lsvi) if f.name != "link"}
    pr["query_mode"] = run.pr_lsvi.query_mode.value
    return {
        "agent": run.agent,
        "episodes": run.episodes,
        "seed": run.seed,
        "beta": run.beta,
        "theory_delta": run.theory_delta,
        "link": run.link.to_dict(),
        "environment": {f.name: getattr(run.environment, f.name) for f in fields(run.environment)},
        "pr_lsvi": pr,
        "pbts": {f.name: getattr(run.pbts, f.name) for f in fields(run.pbts)},
        "sweep": {"betas": list(cfg.sweep.betas), "seeds": list(cfg.sweep.seeds), "jobs": cfg.sweep.jobs},
    }
