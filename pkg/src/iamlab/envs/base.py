"""Shared environment record types."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EnvStep:
    """One transition.  ``info`` carries hidden state for oracles and probes only."""

    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)
