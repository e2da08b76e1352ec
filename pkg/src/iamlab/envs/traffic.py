"""Single-intersection traffic-light control with a hidden return loop.

Two one-lane roads cross at a light.  Each road shows 15 cells to the agent
(the "red box"); a car leaving a road's box drives round a 32-cell loop that
the agent cannot see and re-enters the *other* road's box.  All cells form one
ring::

    A box (15) -> loop A->B (32) -> B box (15) -> loop B->A (32) -> A box

The crossing is the move from box cell ``approach - 1`` to ``approach``.  It
is open only for the road holding green, and closed for both roads while a
requested switch is pending (``yellow_steps`` steps).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dsets import ObservationSchema
from ..errors import ContractError
from .base import EnvStep

VISIBLE = 15
LOOP = 32
ROAD = VISIBLE + LOOP
RING = 2 * ROAD
A_BOX = np.arange(0, VISIBLE)
B_BOX = np.arange(ROAD, ROAD + VISIBLE)
A_LOOP = np.arange(VISIBLE, ROAD)
B_LOOP = np.arange(ROAD + VISIBLE, RING)
# full-state ordering: the 30 visible cells first, then the 64 hidden loop cells
FULL_ORDER = np.concatenate([A_BOX, B_BOX, A_LOOP, B_LOOP])
GREEN_A, GREEN_B = 0, 1
ACTION_NAMES = ("set_green_A", "set_green_B")


@dataclass
class TrafficState:
    occupancy: np.ndarray  # (RING,) bool, ring order
    phase: int = GREEN_A
    yellow_timer: int = 0
    pending: int = GREEN_A
    t: int = 0
    spawned: int = 0
    stopped: int = 0

    def copy(self) -> "TrafficState":
        return TrafficState(self.occupancy.copy(), self.phase, self.yellow_timer, self.pending,
                            self.t, self.spawned, self.stopped)

    @property
    def n_cars(self) -> int:
        return int(self.occupancy.sum())


class TrafficEnv:
    n_actions = 2
    obs_dim = 2 * VISIBLE
    schema = ObservationSchema([("road_A", 0, VISIBLE), ("road_B", VISIBLE, VISIBLE)])
    manual_dset = np.array([VISIBLE - 2, VISIBLE - 1, 2 * VISIBLE - 2, 2 * VISIBLE - 1])
    feature_name = "occupancy"
    hidden_features = np.arange(2 * VISIBLE, RING)

    def __init__(self, horizon: int = 100, spawn_prob: float = 0.1, stop_penalty: float = 0.1,
                 yellow_steps: int = 6, approach: int = 4,
                 rng: np.random.Generator | None = None, seed: int | None = None):
        if not 1 <= approach < VISIBLE:
            raise ContractError(f"approach must be in [1, {VISIBLE - 1}]")
        self.horizon = int(horizon)
        self.spawn_prob = float(spawn_prob)
        self.stop_penalty = float(stop_penalty)
        self.yellow_steps = int(yellow_steps)
        self.approach = int(approach)
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.state: TrafficState | None = None
        self._gate_a = self.approach - 1
        self._gate_b = ROAD + self.approach - 1

    def reset(self) -> np.ndarray:
        self.state = TrafficState(np.zeros(RING, dtype=bool))
        return self.observe()

    def observe(self) -> np.ndarray:
        occ = self.state.occupancy
        return np.concatenate([occ[A_BOX], occ[B_BOX]]).astype(np.float64)

    def _moves(self, occ: np.ndarray, open_a: bool, open_b: bool) -> np.ndarray:
        moves = np.zeros(RING, dtype=bool)
        empty = np.flatnonzero(~occ)
        if empty.size == 0:
            return moves
        # walk backwards from an empty cell so each car sees its successor's decision
        start = int(empty[0])
        nxt_moves, nxt_occ = False, False
        occ_l = occ.tolist()
        for k in range(1, RING + 1):
            i = (start - k) % RING
            if occ_l[i]:
                gate_ok = (open_a or i != self._gate_a) and (open_b or i != self._gate_b)
                m = gate_ok and (not nxt_occ or nxt_moves)
                moves[i] = m
                nxt_moves, nxt_occ = m, True
            else:
                nxt_moves, nxt_occ = False, False
        return moves

    def step(self, action: int) -> EnvStep:
        if self.state is None:
            raise ContractError("step() before reset()")
        if int(action) not in (GREEN_A, GREEN_B):
            raise ContractError(f"invalid traffic action {action!r}")
        s = self.state
        if s.yellow_timer == 0 and int(action) != s.phase:
            s.yellow_timer = self.yellow_steps
            s.pending = int(action)
        blocked = s.yellow_timer > 0
        open_a = not blocked and s.phase == GREEN_A
        open_b = not blocked and s.phase == GREEN_B

        occ = s.occupancy
        moves = self._moves(occ, open_a, open_b)
        new = occ & ~moves
        new[(np.flatnonzero(moves) + 1) % RING] = True
        s.stopped = int((occ & ~moves).sum())

        draws = self.rng.random(2)
        for entry, u in ((A_BOX[0], draws[0]), (B_BOX[0], draws[1])):
            if not new[entry] and u < self.spawn_prob:
                new[entry] = True
                s.spawned += 1
        s.occupancy = new

        if s.yellow_timer > 0:
            s.yellow_timer -= 1
            if s.yellow_timer == 0:
                s.phase = s.pending
        s.t += 1
        reward = -self.stop_penalty * s.stopped
        return EnvStep(self.observe(), reward, s.t >= self.horizon, self.info(blocked))

    def info(self, blocked: bool = False) -> dict:
        s = self.state
        return {
            "occupancy": s.occupancy[FULL_ORDER].astype(np.float64),
            "phase": s.phase,
            "yellow_timer": s.yellow_timer,
            "crossing_blocked": blocked,
            "stopped": s.stopped,
            "n_cars": s.n_cars,
            "spawned": s.spawned,
            "t": s.t,
        }
