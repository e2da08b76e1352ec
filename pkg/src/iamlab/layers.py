"""Parameterised building blocks: dense layers, GRU/LSTM cells, attention scorers.

All layers operate on batched inputs whose last axis is the feature axis.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError

INIT_SCHEMES = ("xavier-uniform", "orthogonal", "zeros")


def init_params(shape: Sequence[int], scheme: str, rng: np.random.Generator,
                gain: float = 1.0) -> np.ndarray:
    """Initial values for a parameter of ``shape``; deterministic given ``rng`` state."""
    shape = tuple(int(n) for n in shape)
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "xavier-uniform":
        fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
        bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if scheme == "orthogonal":
        if len(shape) != 2:
            raise ConfigError("orthogonal init needs a 2-D shape")
        rows, cols = shape
        a = rng.standard_normal((max(rows, cols), min(rows, cols)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        q = q if rows >= cols else q.T
        return gain * q[:rows, :cols]
    raise ConfigError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        from .errors import CheckpointError

        params = dict(self.named_parameters())
        missing = [n for n in params if n not in arrays]
        extra = [n for n in arrays if n not in params]
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing={missing} unexpected={extra}")
        for name, p in params.items():
            if arrays[name].shape != p.data.shape:
                raise CheckpointError(
                    f"array {name!r}: shape {arrays[name].shape} != model shape {p.data.shape}")
        for name, p in params.items():
            p.data[...] = arrays[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


ACTIVATIONS = {
    "identity": lambda t: t,
    "tanh": ag.tanh,
    "relu": ag.relu,
}


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, gain: float = 1.0):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        self.W = ag.parameter(init_params((out_dim, in_dim), "xavier-uniform", rng, gain), "W")
        self.b = ag.parameter(np.zeros(out_dim), "b")

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: Dense, x) -> Tensor:
    x = ag.as_tensor(x)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"dense layer expects {layer.in_dim} inputs, got {x.shape[-1]}")
    return ACTIVATIONS[layer.activation](ag.linear(x, layer.W, layer.b))


class MLP(Module):
    """A stack of dense layers sharing one hidden activation."""

    def __init__(self, in_dim: int, widths: Sequence[int], activation: str = "tanh",
                 out_activation: str | None = None, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        dims = [in_dim, *widths]
        acts = [activation] * len(widths)
        if out_activation is not None and widths:
            acts[-1] = out_activation
        self.layers = [Dense(a, b, act, rng) for a, b, act in zip(dims[:-1], dims[1:], acts)]
        self.in_dim = in_dim
        self.out_dim = dims[-1]

    def __call__(self, x: Tensor) -> Tensor:
        x = ag.as_tensor(x)
        for layer in self.layers:
            x = layer(x)
        return x


class GRUCell(Module):
    """z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    h̃ = tanh(W_h x + U_h (r∘h) + b_h), h' = (1 − z)∘h + z∘h̃."""

    n_states = 1

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        I, H = input_dim, hidden_dim
        for g in "zrh":
            setattr(self, f"W_{g}", ag.parameter(init_params((H, I), "xavier-uniform", rng), f"W_{g}"))
        for g in "zrh":
            setattr(self, f"U_{g}", ag.parameter(init_params((H, H), "orthogonal", rng), f"U_{g}"))
        for g in "zrh":
            setattr(self, f"b_{g}", ag.parameter(np.zeros(H), f"b_{g}"))

    def step(self, x: Tensor, state: tuple[Tensor]) -> tuple[Tensor]:
        return (gru_step(self, x, state[0]),)


def gru_step(cell: GRUCell, x, h) -> Tensor:
    x, h = ag.as_tensor(x), ag.as_tensor(h)
    if x.shape[-1] != cell.input_dim or h.shape[-1] != cell.hidden_dim:
        raise ShapeError(f"gru_step: got x{x.shape}, h{h.shape} for cell "
                         f"({cell.input_dim}->{cell.hidden_dim})")
    z = ag.sigmoid(ag.linear(x, cell.W_z) + ag.linear(h, cell.U_z, cell.b_z))
    r = ag.sigmoid(ag.linear(x, cell.W_r) + ag.linear(h, cell.U_r, cell.b_r))
    cand = ag.tanh(ag.linear(x, cell.W_h) + ag.linear(r * h, cell.U_h, cell.b_h))
    return h + z * (cand - h)


class LSTMCell(Module):
    n_states = 2

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None,
                 forget_bias: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        I, H = input_dim, hidden_dim
        for g in "ifog":
            setattr(self, f"W_{g}", ag.parameter(init_params((H, I), "xavier-uniform", rng), f"W_{g}"))
        for g in "ifog":
            setattr(self, f"U_{g}", ag.parameter(init_params((H, H), "orthogonal", rng), f"U_{g}"))
        for g in "ifog":
            bias = np.full(H, forget_bias) if g == "f" else np.zeros(H)
            setattr(self, f"b_{g}", ag.parameter(bias, f"b_{g}"))

    def step(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        return lstm_step(self, x, state)


def lstm_step(cell: LSTMCell, x, state) -> tuple[Tensor, Tensor]:
    x = ag.as_tensor(x)
    h, c = (ag.as_tensor(s) for s in state)
    if x.shape[-1] != cell.input_dim or h.shape[-1] != cell.hidden_dim or c.shape != h.shape:
        raise ShapeError(f"lstm_step: got x{x.shape}, h{h.shape}, c{c.shape}")

    def gate(g):
        return ag.linear(x, getattr(cell, f"W_{g}")) + ag.linear(h, getattr(cell, f"U_{g}"),
                                                                getattr(cell, f"b_{g}"))

    i = ag.sigmoid(gate("i"))
    f = ag.sigmoid(gate("f"))
    o = ag.sigmoid(gate("o"))
    g = ag.tanh(gate("g"))
    c_new = f * c + i * g
    h_new = o * ag.tanh(c_new)
    return h_new, c_new


CELLS = {"gru": GRUCell, "lstm": LSTMCell}


class AttentionHead(Module):
    """Scores each position with an MLP over (position vector, previous memory).

    The same scorer is applied at every position.
    """

    def __init__(self, position_dim: int, state_dim: int, hidden: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.position_dim, self.state_dim = position_dim, state_dim
        self.hidden = Dense(position_dim + state_dim, hidden, "tanh", rng)
        self.out = Dense(hidden, 1, "identity", rng)

    def scores(self, positions: Tensor, d_prev: Tensor) -> Tensor:
        """Unnormalised scores, shape ``(B, N)`` for positions ``(B, N, V)``."""
        B, N, V = positions.shape
        d = ag.broadcast_to(ag.reshape(d_prev, (B, 1, self.state_dim)), (B, N, self.state_dim))
        s = self.out(self.hidden(ag.concat([positions, d], axis=-1)))
        return ag.reshape(s, (B, N))


def attention_scores(head: AttentionHead, positions, d_prev) -> Tensor:
    """Softmax weights over positions.

    ``positions`` is ``(N, V)`` with ``d_prev`` ``(H,)``, or batched as
    ``(B, N, V)`` with ``(B, H)``.
    """
    positions, d_prev = ag.as_tensor(positions), ag.as_tensor(d_prev)
    single = positions.ndim == 2
    if single:
        positions = ag.reshape(positions, (1, *positions.shape))
        d_prev = ag.reshape(d_prev, (1, -1))
    if positions.ndim != 3 or positions.shape[1] == 0:
        raise ShapeError("attention needs at least one position")
    if positions.shape[2] != head.position_dim or d_prev.shape[-1] != head.state_dim:
        raise ShapeError(f"attention head expects positions of dim {head.position_dim} and "
                         f"state dim {head.state_dim}")
    alpha = ag.softmax(head.scores(positions, d_prev), axis=-1)
    return ag.reshape(alpha, (positions.shape[1],)) if single else alpha
