"""Experiment configuration: a validated TOML registry, overrides and run hashing.

A config file looks like::

    name = "warehouse-iam"
    seeds = [0, 1, 2]

    [env]
    name = "warehouse"

    [policy]
    variant = "iam"
    selector = "manual"

    [ppo]
    lr = 1e-3

Every key is checked against the registries below; unknown keys are rejected by name.
``resolve`` fills in defaults so the written file reproduces a run on its own.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import itertools
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .ppo import PpoConfig

# key -> (type, default)
_ENV_COMMON = {"name": (str, "warehouse"), "horizon": (int, 100), "flicker_p": (float, 0.0)}
ENV_KEYS = {
    "warehouse": {**_ENV_COMMON, "spawn_prob": (float, 0.05), "cancel_window": (int, 8)},
    "traffic": {**_ENV_COMMON, "spawn_prob": (float, 0.1), "stop_penalty": (float, 0.1),
                "yellow_steps": (int, 6), "approach": (int, 4)},
}
POLICY_KEYS = {
    "iam": {"variant": (str, "iam"), "selector": (str, "manual"), "hidden": (int, 64),
            "dset_size": (int, 0), "fnn_widths": (list, [128, 128]), "cell": (str, "gru"),
            "embed_dim": (int, 4), "attention_hidden": (int, 32)},
    "lstm": {"variant": (str, "lstm"), "hidden": (int, 128), "fnn_widths": (list, [128, 128]),
             "cell": (str, "lstm")},
    "fnn": {"variant": (str, "fnn"), "stack": (int, 1), "fnn_widths": (list, [128, 128])},
}
PPO_KEYS = {f.name: (type(f.default), f.default) for f in dataclasses.fields(PpoConfig)
            if f.name != "seed"}
EVAL_KEYS = {"episodes": (int, 100), "mode": (str, "sample"), "seed": (int, 12345)}
TOP_KEYS = {"name": str, "seeds": list, "out": str}
SECTIONS = ("env", "policy", "ppo", "eval", "sweep")

SELECTORS = ("manual", "static", "dynamic")


def _coerce(value, kind, where: str):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is list and isinstance(value, tuple):
        value = list(value)
    if kind is bool or isinstance(value, bool):
        if not isinstance(value, bool) or kind is not bool:
            raise ConfigError(f"{where}: expected {kind.__name__}, got {value!r}")
        return value
    if not isinstance(value, kind):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {type(value).__name__} {value!r}")
    if kind is float and not math.isfinite(value):
        raise ConfigError(f"{where}: must be finite")
    return value


def _fill(section: dict, keys: dict, where: str) -> dict:
    unknown = sorted(set(section) - set(keys))
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}; allowed: {', '.join(sorted(keys))}")
    out = {}
    for key, (kind, default) in keys.items():
        value = section.get(key, copy.deepcopy(default))
        out[key] = _coerce(value, kind, f"{where}.{key}")
    return out


@dataclass
class ExperimentConfig:
    name: str
    env: dict
    policy: dict
    ppo: dict
    eval: dict
    seeds: list
    sweep: dict
    out: str = ""
    # the user's unresolved config, so sweep cells get their own variant's defaults
    raw: dict = dataclasses.field(default_factory=dict, compare=False, repr=False)

    def ppo_config(self, seed: int) -> PpoConfig:
        return PpoConfig(seed=int(seed), **self.ppo)

    def as_dict(self) -> dict:
        d = {"name": self.name, "seeds": list(self.seeds), "env": dict(self.env),
             "policy": dict(self.policy), "ppo": dict(self.ppo), "eval": dict(self.eval)}
        if self.sweep:
            d["sweep"] = copy.deepcopy(self.sweep)
        if self.out:
            d["out"] = self.out
        return d

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=[int(seed)], sweep={})

    def config_hash(self) -> str:
        """sha256 over the canonical JSON of everything that shapes the results."""
        d = self.as_dict()
        d.pop("out", None)
        d.pop("name", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_toml(self) -> str:
        return dump_toml(self.as_dict())


def resolve(raw: dict) -> ExperimentConfig:
    """Validate ``raw`` against the registry and fill in every default."""
    raw = copy.deepcopy(raw)
    for key in raw:
        if key not in TOP_KEYS and key not in SECTIONS:
            raise ConfigError(f"unknown key {key}; allowed top-level keys: "
                              f"{', '.join(sorted([*TOP_KEYS, *SECTIONS]))}")
        if key in SECTIONS and not isinstance(raw[key], dict):
            raise ConfigError(f"[{key}] must be a table")
    env_raw = raw.get("env", {})
    env_name = env_raw.get("name", "warehouse")
    if env_name not in ENV_KEYS:
        raise ConfigError(f"env.name: unknown environment {env_name!r}; expected one of {sorted(ENV_KEYS)}")
    env = _fill(env_raw, ENV_KEYS[env_name], "env")
    if not 0.0 <= env["flicker_p"] < 1.0:
        raise ConfigError("env.flicker_p must lie in [0, 1)")
    if env["horizon"] < 1:
        raise ConfigError("env.horizon must be >= 1")

    pol_raw = raw.get("policy", {})
    variant = pol_raw.get("variant", "iam")
    if variant not in POLICY_KEYS:
        raise ConfigError(f"policy.variant: unknown variant {variant!r}; expected one of {sorted(POLICY_KEYS)}")
    policy = _fill(pol_raw, POLICY_KEYS[variant], "policy")
    if variant == "iam" and policy["selector"] not in SELECTORS:
        raise ConfigError(f"policy.selector: expected one of {SELECTORS}, got {policy['selector']!r}")
    if policy.get("hidden", 1) < 1 or policy.get("stack", 1) < 1:
        raise ConfigError("policy.hidden and policy.stack must be >= 1")

    ppo = _fill(raw.get("ppo", {}), PPO_KEYS, "ppo")
    try:
        PpoConfig(**ppo)
    except ConfigError as exc:
        raise ConfigError(f"ppo: {exc}") from None
    ev = _fill(raw.get("eval", {}), EVAL_KEYS, "eval")
    if ev["mode"] not in ("sample", "greedy"):
        raise ConfigError("eval.mode must be 'sample' or 'greedy'")

    seeds = _coerce(raw.get("seeds", [0]), list, "seeds")
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    sweep = raw.get("sweep", {})
    for axis, values in sweep.items():
        section, _, key = axis.partition(".")
        if section not in ("env", "policy", "ppo") or not key:
            raise ConfigError(f"sweep.{axis}: axes are dotted keys into env, policy or ppo")
        if not isinstance(values, list):
            raise ConfigError(f"sweep.{axis}: expected a list of values")
    return ExperimentConfig(_coerce(raw.get("name", ""), str, "name"), env, policy, ppo, ev,
                            [int(s) for s in seeds], sweep, _coerce(raw.get("out", ""), str, "out"),
                            raw)


def parse_value(text: str):
    """Interpret an override's right-hand side as a TOML value, else a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings to a raw (unresolved) config dict."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        key, sep, text = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part} is not a table")
        node[parts[-1]] = parse_value(text.strip())
    return raw


def load_raw(path: str | Path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path: str | Path | None = None, overrides=()) -> ExperimentConfig:
    raw = load_raw(path) if path is not None else {}
    return resolve(apply_overrides(raw, overrides))


def expand_sweep(config: ExperimentConfig) -> list[ExperimentConfig]:
    """Cross product of the sweep axes and the seeds, one single-seed config per cell."""
    if not config.sweep:
        raise ConfigError("empty sweep grid: add a [sweep] table with at least one axis")
    axes = sorted(config.sweep)
    if any(len(config.sweep[a]) == 0 for a in axes):
        raise ConfigError("empty sweep grid: every axis needs at least one value")
    cells = []
    base = copy.deepcopy(config.raw) if config.raw else config.as_dict()
    base.pop("sweep", None)
    for combo in itertools.product(*(config.sweep[a] for a in axes)):
        overrides = [f"{a}={json.dumps(v)}" for a, v in zip(axes, combo)]
        cell = resolve(apply_overrides(base, overrides))
        cells.extend(cell.for_seed(s) for s in config.seeds)
    return cells


# -- writing -------------------------------------------------------------------

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (int, str)):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot write {type(v).__name__} to TOML")


def dump_toml(d: dict) -> str:
    lines = [f"{k} = {_toml_value(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for k, v in d.items():
        if isinstance(v, dict):
            lines += ["", f"[{k}]"]
            lines += [f'{json.dumps(kk) if "." in kk else kk} = {_toml_value(vv)}'
                      for kk, vv in v.items()]
    return "\n".join(lines) + "\n"


def policy_spec(config: ExperimentConfig) -> dict:
    spec = dict(config.policy)
    if spec.get("dset_size") == 0:
        spec.pop("dset_size")
    return spec


def env_spec(config: ExperimentConfig) -> dict:
    spec = dict(config.env)
    if spec["flicker_p"] == 0.0:
        spec.pop("flicker_p")
    return spec
