"""Warehouse commissioning on a 7x7 grid.

Items appear on the 24 boundary cells and expire after ``cancel_window`` steps
unless the robot reaches them.  The robot observes its one-hot location and
the item-active bits; the per-item time counters are hidden.

Step order: move, spawn on inactive cells, age active items (cancelling those
that reach ``cancel_window + 1``), then pick up the item under the robot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dsets import ObservationSchema
from ..errors import ContractError
from .base import EnvStep

GRID = 7
N_CELLS = GRID * GRID
ITEM_CELLS = [(r, c) for r in range(GRID) for c in range(GRID)
              if r in (0, GRID - 1) or c in (0, GRID - 1)]
N_ITEMS = len(ITEM_CELLS)
ACTIONS = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}  # up, down, left, right
ACTION_NAMES = ("up", "down", "left", "right")
_ITEM_INDEX = {cell: i for i, cell in enumerate(ITEM_CELLS)}


@dataclass
class WarehouseState:
    agent_pos: tuple[int, int]
    item_active: np.ndarray
    counters: np.ndarray
    t: int = 0
    pickups: np.ndarray = field(default_factory=lambda: np.zeros(N_ITEMS, dtype=bool))

    def copy(self) -> "WarehouseState":
        return WarehouseState(self.agent_pos, self.item_active.copy(), self.counters.copy(),
                              self.t, self.pickups.copy())


class WarehouseEnv:
    n_actions = 4
    obs_dim = N_CELLS + N_ITEMS
    schema = ObservationSchema([("location", 0, N_CELLS), ("items", N_CELLS, N_ITEMS)])
    manual_dset = np.arange(N_CELLS, N_CELLS + N_ITEMS)
    feature_name = "counters"

    def __init__(self, horizon: int = 100, spawn_prob: float = 0.05, cancel_window: int = 8,
                 rng: np.random.Generator | None = None, seed: int | None = None):
        self.horizon = int(horizon)
        self.spawn_prob = float(spawn_prob)
        self.cancel_window = int(cancel_window)
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.state: WarehouseState | None = None

    def reset(self) -> np.ndarray:
        centre = (GRID // 2, GRID // 2)
        self.state = WarehouseState(centre, np.zeros(N_ITEMS, dtype=bool),
                                    np.zeros(N_ITEMS, dtype=np.int64))
        return self.observe()

    def observe(self) -> np.ndarray:
        s = self.state
        obs = np.zeros(self.obs_dim)
        obs[s.agent_pos[0] * GRID + s.agent_pos[1]] = 1.0
        obs[N_CELLS:] = s.item_active
        return obs

    def step(self, action: int) -> EnvStep:
        if self.state is None:
            raise ContractError("step() before reset()")
        if int(action) not in ACTIONS:
            raise ContractError(f"invalid warehouse action {action!r}")
        s = self.state
        dr, dc = ACTIONS[int(action)]
        r = min(max(s.agent_pos[0] + dr, 0), GRID - 1)
        c = min(max(s.agent_pos[1] + dc, 0), GRID - 1)
        s.agent_pos = (r, c)

        spawn = (~s.item_active) & (self.rng.random(N_ITEMS) < self.spawn_prob)
        s.item_active |= spawn
        s.counters[s.item_active] += 1
        expired = s.counters > self.cancel_window
        s.item_active[expired] = False
        s.counters[expired] = 0

        s.pickups = np.zeros(N_ITEMS, dtype=bool)
        reward = 0.0
        idx = _ITEM_INDEX.get(s.agent_pos)
        if idx is not None and s.item_active[idx]:
            s.pickups[idx] = True
            s.item_active[idx] = False
            s.counters[idx] = 0
            reward = 1.0
        s.t += 1
        done = s.t >= self.horizon
        return EnvStep(self.observe(), reward, done, self.info())

    def info(self) -> dict:
        s = self.state
        return {
            "counters": s.counters.copy(),
            "item_active": s.item_active.copy(),
            "pickups": s.pickups.copy(),
            "agent_pos": s.agent_pos,
            "t": s.t,
        }


class CounterOracle:
    """Rebuilds every hidden item counter from the d-set variables alone.

    Consumes, per step, the item-active bits and the pickup indicators; it
    never looks at the simulator's counters.
    """

    def __init__(self, n_items: int = N_ITEMS, cancel_window: int = 8):
        self.cancel_window = cancel_window
        self.counters = np.zeros(n_items, dtype=np.int64)

    def update(self, item_active, pickups) -> np.ndarray:
        active = np.asarray(item_active, dtype=bool)
        picked = np.asarray(pickups, dtype=bool)
        if active.shape != self.counters.shape or picked.shape != self.counters.shape:
            raise ContractError("history entries must hold one bit per item")
        if (active & picked).any():
            raise ContractError("an item cannot be active right after being picked up")
        self.counters = np.where(active & ~picked, self.counters + 1, 0)
        if (self.counters > self.cancel_window).any():
            raise ContractError("history implies an item outlived its cancel window")
        return self.counters.copy()


def dset_counter_oracle(history, n_items: int = N_ITEMS, cancel_window: int = 8) -> np.ndarray:
    """Counters after replaying ``history``: an iterable of (item_active, pickups) pairs from reset."""
    oracle = CounterOracle(n_items, cancel_window)
    for entry in history:
        if len(entry) != 2:
            raise ContractError("history entries are (item_active, pickups) pairs")
        oracle.update(*entry)
    return oracle.counters.copy()


def memoryless_counter_guess(obs: np.ndarray) -> np.ndarray:
    """Best single-observation guess: an active item is assumed fresh."""
    return (np.asarray(obs)[N_CELLS:] > 0.5).astype(np.int64)
