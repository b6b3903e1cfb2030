"""Experiment configuration: TOML files, defaults, environment overrides.

A config is a nested dict with the tables ``system``, ``loss``, ``learner``,
``sweep`` and ``output`` plus a few top-level keys.  ``load`` fills in
defaults, applies ``DRCAGD_<TABLE>__<KEY>`` environment overrides and
validates the result; ``dump`` writes the effective config back out.
"""

from __future__ import annotations

import copy
import math
import os
import sys
from dataclasses import dataclass
from importlib import resources

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import lti
from .learner import CASE_IDS, ConfigurationError, LambdaSchedule
from .regret import EpisodeConfig

SCHEMA_VERSION = 1
ENV_PREFIX = "DRCAGD_"
SYSTEM_PRESETS = ("scalar-stable", "random-stable")
TRACE_MODES = ("all", "first-seed", "none")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "out": "results",
    "parallel": 1,
    "system": {
        "preset": "scalar-stable",
        "a": 0.3,
        "b": 1.0,
        "c": 1.0,
        "dx": 3,
        "du": 1,
        "dy": 1,
        "rho": 0.8,
        "system_seed": 0,
        "noise": "uniform-ball",
        "w_scale": 0.5,
        "e_scale": 0.5,
    },
    "loss": {
        "family": "auto",
        "H": 1.0,
        "target_radius": 0.5,
    },
    "learner": {
        "radius": 1.0,
        "memory": "sweep-max",
        "gradient_mode": "realized",
        "mc_samples": 8,
        "lambdas": [],
    },
    "sweep": {
        "cases": [1, 2, 3],
        "alphas": [0.25],
        "horizons": [256, 512, 1024, 2048, 4096, 8192],
        "seeds": 20,
    },
    "output": {
        "traces": "first-seed",
        "ldc_samples": 8,
    },
}


class ConfigError(ConfigurationError):
    """Malformed or invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(where, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(where, "expected a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_env_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ=None):
    """Nested dict from ``DRCAGD_SWEEP__SEEDS=4`` style variables."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, text in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX) :].split("__")]
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = _parse_env_value(text)
    return out


def parse(text, environ=None):
    """Parse TOML text into a validated effective config."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"TOML parse error: {exc}") from exc
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})")
    cfg = _merge(DEFAULTS, raw)
    cfg = _merge(cfg, env_overrides(environ))
    validate(cfg)
    return cfg


def load(path, environ=None):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), environ)


def load_default(name="corollary1", environ=None):
    """A packaged config; environment overrides apply only when ``environ`` is given."""
    text = resources.files("drc_agd").joinpath("configs").joinpath(f"{name}.toml").read_text(encoding="utf-8")
    return parse(text, environ={} if environ is None else environ)


def dumps(cfg) -> str:
    return tomli_w.dumps(cfg)


def dump(cfg, path):
    with open(path, "wb") as fh:
        tomli_w.dump(cfg, fh)


# ---------------------------------------------------------------------------
# validation


def _require(cond, key, message):
    if not cond:
        raise ConfigError(key, message)


def _number(cfg, table, key, positive=False, nonneg=False):
    v = cfg[table][key]
    where = f"{table}.{key}"
    _require(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v), where, "expected a number")
    if positive:
        _require(v > 0, where, "must be positive")
    if nonneg:
        _require(v >= 0, where, "must be nonnegative")
    return v


def _integer(value, where, minimum):
    _require(isinstance(value, int) and not isinstance(value, bool), where, "expected an integer")
    _require(value >= minimum, where, f"must be >= {minimum}")
    return value


def parse_case(value, where="sweep.cases"):
    if isinstance(value, str):
        if value == "custom":
            return "custom"
        inv = {v: k for k, v in CASE_IDS.items()}
        if value in inv:
            return inv[value]
        try:
            value = int(value)
        except ValueError:
            raise ConfigError(where, f"unknown case {value!r}") from None
    _require(value in CASE_IDS, where, f"unknown case {value!r}; expected 1-4 or 'custom'")
    return value


def case_alphas(case, alphas):
    """The alpha values a case runs with (cases 1, 2 and custom ignore alpha)."""
    if case == 3:
        return [a for a in alphas if 0 < a <= 0.5]
    if case == 4:
        return [a for a in alphas if a > 0.5]
    return [0.0]


def validate(cfg):
    """Dry-run validation of a merged config; raises ConfigError on the first problem."""
    _integer(cfg["schema_version"], "schema_version", 1)
    _integer(cfg["seed"], "seed", 0)
    _integer(cfg["parallel"], "parallel", 1)
    _require(isinstance(cfg["out"], str) and cfg["out"], "out", "expected a directory path")

    s = cfg["system"]
    _require(s["preset"] in SYSTEM_PRESETS, "system.preset", f"unknown preset {s['preset']!r}; expected {SYSTEM_PRESETS}")
    _require(s["noise"] in lti.NOISE_KINDS, "system.noise", f"expected one of {lti.NOISE_KINDS}")
    _number(cfg, "system", "w_scale", nonneg=True)
    _number(cfg, "system", "e_scale", nonneg=True)
    if s["preset"] == "scalar-stable":
        for key in ("a", "b", "c"):
            _number(cfg, "system", key)
        _require(abs(s["a"]) < 1, "system.a", "scalar-stable preset needs |a| < 1")
    else:
        for key in ("dx", "du", "dy"):
            _integer(s[key], f"system.{key}", 1)
        _integer(s["system_seed"], "system.system_seed", 0)
        rho = _number(cfg, "system", "rho", nonneg=True)
        _require(rho < 1, "system.rho", "spectral radius must be below 1")

    fam = cfg["loss"]["family"]
    families = ("auto", "quadratic", "rank-deficient-quadratic", "smoothed-absolute")
    _require(fam in families, "loss.family", f"expected one of {families}")
    _number(cfg, "loss", "H", positive=True)
    _number(cfg, "loss", "target_radius", nonneg=True)

    ln = cfg["learner"]
    _number(cfg, "learner", "radius", positive=True)
    mem = ln["memory"]
    if isinstance(mem, list):
        _require(len(mem) == 2, "learner.memory", "expected [m, h]")
        _integer(mem[0], "learner.memory", 1)
        _integer(mem[1], "learner.memory", 0)
    else:
        _require(mem in ("auto", "sweep-max"), "learner.memory", "expected 'auto', 'sweep-max' or [m, h]")
    _require(ln["gradient_mode"] in ("realized", "monte-carlo"), "learner.gradient_mode", "expected 'realized' or 'monte-carlo'")
    _integer(ln["mc_samples"], "learner.mc_samples", 1)
    _require(isinstance(ln["lambdas"], list), "learner.lambdas", "expected a list")
    if ln["lambdas"]:
        try:
            LambdaSchedule("custom", ln["lambdas"])
        except ConfigurationError as exc:
            raise ConfigError(
                "learner.lambdas", f"{exc} (the memory regret bound requires lambda_j <= lambda_i for j >= i)"
            ) from None

    sw = cfg["sweep"]
    _require(isinstance(sw["cases"], list) and sw["cases"], "sweep.cases", "expected a non-empty list")
    cases = [parse_case(c) for c in sw["cases"]]
    _require(isinstance(sw["alphas"], list), "sweep.alphas", "expected a list")
    for a in sw["alphas"]:
        _require(isinstance(a, (int, float)) and a > 0, "sweep.alphas", "alpha values must be positive")
    hs = sw["horizons"]
    _require(isinstance(hs, list) and hs, "sweep.horizons", "expected a non-empty list")
    for T in hs:
        _integer(T, "sweep.horizons", 1)
    _require(all(b > a for a, b in zip(hs, hs[1:])), "sweep.horizons", "horizons must be strictly increasing")
    _integer(sw["seeds"], "sweep.seeds", 1)
    for c in cases:
        if c == "custom":
            _require(bool(ln["lambdas"]), "learner.lambdas", "case 'custom' needs an explicit lambda list")
            continue
        _require(
            hs[0] >= 4,
            "sweep.horizons",
            f"T={hs[0]} is below the T >= 4 precondition of the curvature-regime presets (case {c})",
        )
        if c in (3, 4):
            _require(bool(case_alphas(c, sw["alphas"])), "sweep.alphas", f"case {c} has no compatible alpha value")

    out = cfg["output"]
    _require(out["traces"] in TRACE_MODES, "output.traces", f"expected one of {TRACE_MODES}")
    _integer(out["ldc_samples"], "output.ldc_samples", 0)
    return cfg


# ---------------------------------------------------------------------------
# building runtime objects


def build_system(cfg) -> lti.SystemModel:
    s = cfg["system"]
    if s["noise"] == "uniform-ball":
        make = lti.BoundedNoiseSpec.uniform_ball
    else:
        make = lti.BoundedNoiseSpec.truncated_gaussian
    if s["preset"] == "scalar-stable":
        return lti.SystemModel([[s["a"]]], [[s["b"]]], [[s["c"]]], make(1, s["w_scale"]), make(1, s["e_scale"]))
    return lti.random_stable_system(
        s["dx"], s["du"], s["dy"], s["rho"], s["system_seed"],
        noise_w=make(s["dx"], s["w_scale"]), noise_e=make(s["dy"], s["e_scale"]),
    )


def episode_seed(global_seed, index):
    """Episode seed for replicate ``index``; independent of horizon and case."""
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


@dataclass(frozen=True)
class Job:
    case: int | str
    alpha: float
    T: int
    seed_index: int
    seed: int
    memory: tuple | None


def plan(cfg):
    """All (case, alpha, T, seed) jobs in deterministic output order."""
    model = build_system(cfg)
    sw, ln = cfg["sweep"], cfg["learner"]
    mem = ln["memory"]
    if mem == "sweep-max":
        memory = lti.select_memory(model, ln["radius"], sw["horizons"][-1])
    elif mem == "auto":
        memory = None
    else:
        memory = tuple(mem)
    jobs = []
    for case in (parse_case(c) for c in sw["cases"]):
        for alpha in case_alphas(case, sw["alphas"]):
            for T in sw["horizons"]:
                for i in range(sw["seeds"]):
                    jobs.append(Job(case, alpha, T, i, episode_seed(cfg["seed"], i), memory))
    return jobs


def episode_config(cfg, job: Job, model=None) -> EpisodeConfig:
    model = build_system(cfg) if model is None else model
    fam = cfg["loss"]["family"]
    ln = cfg["learner"]
    return EpisodeConfig(
        system=model,
        T=job.T,
        case=job.case,
        seed=job.seed,
        loss_family=None if fam == "auto" else fam,
        H=cfg["loss"]["H"],
        alpha=job.alpha,
        target_radius=cfg["loss"]["target_radius"],
        radius=ln["radius"],
        memory=job.memory,
        lambdas=ln["lambdas"] or None,
        gradient_mode=ln["gradient_mode"],
        mc_samples=ln["mc_samples"],
        ldc_samples=cfg["output"]["ldc_samples"],
    )
