"""Operators that decide which observation variables reach the recurrent memory.

Three selectors share one call signature ``selector(obs, d_prev)``:

* :class:`ManualSelector` gathers a fixed, designer-chosen index mask.
* :class:`StaticSelector` applies a trainable ``K x N`` matrix ``A``.
* :class:`AttentionSelector` recomputes ``K`` soft selections each step from
  the observation and the previous memory (multi-head spatial attention).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .layers import AttentionHead, Module, attention_scores, init_params


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.length)


class ObservationSchema:
    """Named, disjoint segments covering a flat observation vector."""

    def __init__(self, segments: Sequence[tuple[str, int, int]]):
        self.segments = [Segment(*s) for s in segments]
        pos = 0
        for seg in sorted(self.segments, key=lambda s: s.offset):
            if seg.offset != pos or seg.length <= 0:
                raise ConfigError(f"schema segments must be disjoint and cover the vector; "
                                  f"problem at {seg.name!r}")
            pos += seg.length
        self.size = pos
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate segment names")

    def __getitem__(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def split(self, obs: np.ndarray) -> dict[str, np.ndarray]:
        return {s.name: np.asarray(obs)[..., s.offset:s.offset + s.length] for s in self.segments}

    def __repr__(self) -> str:
        inner = ", ".join(f"{s.name}[{s.offset}:{s.offset + s.length}]" for s in self.segments)
        return f"ObservationSchema({inner})"


def validate_mask(mask: Sequence[int], n_obs: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64).reshape(-1)
    if mask.size == 0:
        raise ConfigError("d-set mask is empty")
    if len(np.unique(mask)) != mask.size:
        raise ConfigError("d-set mask indices must be unique")
    if mask.min() < 0 or mask.max() >= n_obs:
        raise ConfigError(f"d-set mask index out of range [0, {n_obs})")
    return mask


def select_manual(obs, mask: Sequence[int]) -> Tensor:
    obs = ag.as_tensor(obs)
    mask = validate_mask(mask, obs.shape[-1])
    return ag.take(obs, mask, axis=-1)


def select_static(obs, A) -> Tensor:
    obs, A = ag.as_tensor(obs), ag.as_tensor(A)
    if A.ndim != 2 or A.shape[1] != obs.shape[-1]:
        raise ShapeError(f"selector matrix {A.shape} does not match observation dim {obs.shape[-1]}")
    return ag.linear(obs, A)


def select_dynamic(positions, d_prev, heads: Sequence[AttentionHead]) -> Tensor:
    """Concatenated per-head contexts ``sum_i alpha_{k,i} * position_i``.

    ``positions`` is ``(N, V)`` or batched ``(B, N, V)``; the result is
    ``(K*V,)`` or ``(B, K*V)``.
    """
    if not heads:
        raise ConfigError("dynamic selection needs at least one attention head")
    positions, d_prev = ag.as_tensor(positions), ag.as_tensor(d_prev)
    single = positions.ndim == 2
    if single:
        positions = ag.reshape(positions, (1, *positions.shape))
        d_prev = ag.reshape(d_prev, (1, -1))
    B, N, V = positions.shape
    contexts = []
    for head in heads:
        alpha = attention_scores(head, positions, d_prev)
        weighted = ag.reshape(alpha, (B, N, 1)) * positions
        contexts.append(ag.tsum(weighted, axis=1))
    out = ag.concat(contexts, axis=-1)
    return ag.reshape(out, (len(heads) * V,)) if single else out


def positions_from_schema(obs: np.ndarray, schema: ObservationSchema,
                          granularity: str = "per-variable") -> list[np.ndarray]:
    obs = np.asarray(obs, dtype=np.float64)
    if granularity == "per-variable":
        return [obs[i:i + 1] for i in range(obs.shape[-1])]
    if granularity == "per-segment":
        return [obs[s.offset:s.offset + s.length] for s in schema.segments]
    raise ConfigError(f"unknown granularity {granularity!r}")


class ManualSelector(Module):
    dynamic = False

    def __init__(self, mask: Sequence[int], n_obs: int):
        self.mask = validate_mask(mask, n_obs)
        self.n_obs = n_obs
        self.out_dim = int(self.mask.size)

    def __call__(self, obs: Tensor, d_prev: Tensor | None = None) -> Tensor:
        return ag.take(ag.as_tensor(obs), self.mask, axis=-1)


class StaticSelector(Module):
    dynamic = False

    def __init__(self, n_obs: int, k: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.n_obs, self.out_dim = n_obs, k
        self.A = ag.parameter(init_params((k, n_obs), "xavier-uniform", rng), "A")

    def __call__(self, obs: Tensor, d_prev: Tensor | None = None) -> Tensor:
        return select_static(obs, self.A)

    def export_csv(self, path: str | Path) -> Path:
        return export_matrix_csv(self.A.data, path)


class AttentionSelector(Module):
    """Per-variable positions: the scalar value plus a learned embedding."""

    dynamic = True

    def __init__(self, n_obs: int, k: int, state_dim: int, embed_dim: int = 4,
                 hidden: int = 32, rng: np.random.Generator | None = None):
        if k < 1:
            raise ConfigError("dynamic selection needs at least one attention head")
        rng = rng or np.random.default_rng(0)
        self.n_obs, self.embed_dim = n_obs, embed_dim
        self.position_dim = 1 + embed_dim
        self.embedding = ag.parameter(rng.normal(0.0, 1.0, size=(n_obs, embed_dim)), "embedding")
        self.heads = [AttentionHead(self.position_dim, state_dim, hidden, rng) for _ in range(k)]
        self.out_dim = k * self.position_dim

    def positions(self, obs: Tensor) -> Tensor:
        obs = ag.as_tensor(obs)
        B = obs.shape[0]
        values = ag.reshape(obs, (B, self.n_obs, 1))
        emb = ag.broadcast_to(ag.reshape(self.embedding, (1, self.n_obs, self.embed_dim)),
                              (B, self.n_obs, self.embed_dim))
        return ag.concat([values, emb], axis=-1)

    def __call__(self, obs: Tensor, d_prev: Tensor) -> Tensor:
        return select_dynamic(self.positions(obs), d_prev, self.heads)

    def weights(self, obs: Tensor, d_prev: Tensor) -> np.ndarray:
        """Attention weights ``(K, B, N)`` for inspection."""
        with ag.no_grad():
            pos = self.positions(obs)
            return np.stack([attention_scores(h, pos, ag.as_tensor(d_prev)).data
                             for h in self.heads])


def export_matrix_csv(matrix: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row"] + [f"obs_{j}" for j in range(matrix.shape[1])])
        for i, row in enumerate(np.asarray(matrix)):
            writer.writerow([i] + [repr(float(v)) for v in row])
    return path


def load_matrix_csv(path: str | Path) -> np.ndarray:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])
