"""Partially observable benchmark environments and wrappers."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import ConfigError
from .base import EnvStep
from .traffic import TrafficEnv, TrafficState
from .warehouse import (CounterOracle, WarehouseEnv, WarehouseState, dset_counter_oracle,
                        memoryless_counter_guess)
from .wrappers import Flicker, FrameStack, flicker, frame_stack

ENVIRONMENTS = {"warehouse": WarehouseEnv, "traffic": TrafficEnv}

__all__ = [
    "EnvStep", "TrafficEnv", "TrafficState", "WarehouseEnv", "WarehouseState", "CounterOracle",
    "dset_counter_oracle", "memoryless_counter_guess", "Flicker", "FrameStack", "flicker",
    "frame_stack", "make_env", "env_class", "write_trace", "read_trace",
]


def env_class(name: str):
    try:
        return ENVIRONMENTS[name]
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; expected one of {sorted(ENVIRONMENTS)}") from None


def make_env(name: str, rng: np.random.Generator, *, flicker_p: float = 0.0, stack: int = 1,
             **kwargs):
    """Build an environment with optional flicker and frame-stack wrappers.

    The base environment and the flicker wrapper draw from independent
    child streams of ``rng``.
    """
    env_rng, flick_rng = rng.spawn(2)
    env = env_class(name)(rng=env_rng, **kwargs)
    if flicker_p > 0.0:
        env = Flicker(env, flicker_p, flick_rng)
    if stack > 1:
        env = FrameStack(env, stack)
    return env


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_trace(path: str | Path, records: Iterable[dict]) -> Path:
    """JSONL episode trace: one object per step with obs, action, reward, done and hidden info."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
    return path


def read_trace(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
