"""Observation wrappers: flickering frames and frame stacking."""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from ..errors import ConfigError
from .base import EnvStep


def flicker(obs: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Blank the whole observation with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"flicker probability must lie in [0, 1], got {p}")
    if rng.random() < p:
        return np.zeros_like(obs)
    return obs


def frame_stack(stream: Iterable[np.ndarray], k: int) -> Iterator[np.ndarray]:
    """Yield newest-first stacks of the last ``k`` frames, zero-padded at the start."""
    if k < 1:
        raise ConfigError("stack depth must be >= 1")
    frames: list[np.ndarray] = []
    for obs in stream:
        frames.insert(0, np.asarray(obs, dtype=np.float64))
        del frames[k:]
        pad = [np.zeros_like(frames[0])] * (k - len(frames))
        yield np.concatenate(frames + pad)


class Flicker:
    def __init__(self, env, p: float, rng: np.random.Generator):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"flicker probability must lie in [0, 1], got {p}")
        self.env, self.p, self.rng = env, float(p), rng

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset(self) -> np.ndarray:
        return flicker(self.env.reset(), self.p, self.rng)

    def step(self, action: int) -> EnvStep:
        out = self.env.step(action)
        out.observation = flicker(out.observation, self.p, self.rng)
        return out


class FrameStack:
    def __init__(self, env, k: int):
        if k < 1:
            raise ConfigError("stack depth must be >= 1")
        self.env, self.k = env, int(k)
        self.obs_dim = env.obs_dim * self.k
        self._frames: list[np.ndarray] = []

    def __getattr__(self, name):
        return getattr(self.env, name)

    def _stacked(self) -> np.ndarray:
        pad = [np.zeros(self.env.obs_dim)] * (self.k - len(self._frames))
        return np.concatenate(self._frames + pad)

    def reset(self) -> np.ndarray:
        self._frames = [self.env.reset()]
        return self._stacked()

    def step(self, action: int) -> EnvStep:
        out = self.env.step(action)
        self._frames.insert(0, out.observation)
        del self._frames[self.k:]
        out.observation = self._stacked()
        return out
