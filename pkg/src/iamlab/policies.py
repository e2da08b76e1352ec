"""Actor-critic networks: influence-aware memory (IAM) and two baselines.

All networks expose the same sequence interface::

    out = net.forward(obs, state, starts)   # obs (T, B, N), starts (T, B)

where ``starts[t, b]`` marks the first step of an episode, at which the
recurrent state is zeroed before use.  Collection calls ``forward`` with
``T = 1``; PPO replays chunks with ``T = L``.  Because every contraction is
row-independent (see :mod:`iamlab.autograd`) the two paths agree bit for bit.

IAM runs two channels in parallel.  The feedforward stack maps the whole
observation to ``x_t``.  The recurrent cell only sees ``D(o_t)`` and carries
``d_t``.  The policy and value heads read ``[x_t, d_t]``.  ``x_t`` is never
fed back into the memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dsets import AttentionSelector, ManualSelector, StaticSelector
from .errors import ConfigError, ContractError, ShapeError
from .layers import CELLS, MLP, Dense, Module

POLICY_HEAD_GAIN = 0.01


@dataclass
class PolicyOutput:
    logits: Tensor            # (T, B, A)
    value: Tensor             # (T, B)
    new_state: tuple          # tuple of (B, H) tensors; empty for stateless nets
    features: Tensor | None = None    # x_t, (T, B, F)
    memory: Tensor | None = None      # d_t or h_t, (T, B, H)


def _mask_state(state: tuple, keep: np.ndarray | None) -> tuple:
    if keep is None:
        return state
    return tuple(s * keep for s in state)


def _heads(net, feat: Tensor) -> tuple[Tensor, Tensor]:
    logits = net.pi_head(feat)
    T, B = feat.shape[0], feat.shape[1]
    value = ag.reshape(net.v_head(feat), (T, B))
    return logits, value


def gather_logprob(logp: np.ndarray | Tensor, actions: np.ndarray) -> Tensor:
    """``logp[..., a]`` via a one-hot contraction so both paths round identically."""
    logp = ag.as_tensor(logp)
    onehot = np.eye(logp.shape[-1])[np.asarray(actions, dtype=np.int64)]
    return ag.tsum(logp * onehot, axis=-1)


class _Base(Module):
    recurrent = True
    variant = "base"

    def _check_obs(self, obs) -> Tensor:
        obs = ag.as_tensor(obs)
        if obs.ndim != 3 or obs.shape[-1] != self.obs_dim:
            raise ShapeError(f"{self.variant} expects obs of shape (T, B, {self.obs_dim}), "
                             f"got {obs.shape}")
        return obs

    def initial_state(self, batch: int = 1) -> tuple:
        if not self.recurrent:
            return ()
        return tuple(np.zeros((batch, self.hidden_dim)) for _ in range(self.cell.n_states))

    def _run_cell(self, inputs, obs: Tensor, state: tuple, starts) -> tuple[list, tuple]:
        T = obs.shape[0]
        state = tuple(ag.as_tensor(s) for s in state)
        B = obs.shape[1]
        if len(state) != self.cell.n_states or any(s.shape != (B, self.hidden_dim) for s in state):
            raise ContractError(f"recurrent state must be {self.cell.n_states} arrays of shape "
                                f"({B}, {self.hidden_dim})")
        outs = []
        for t in range(T):
            keep = None if starts is None else (1.0 - np.asarray(starts[t], dtype=np.float64))[:, None]
            state = _mask_state(state, keep)
            inp = inputs(t, state[0])
            state = self.cell.step(inp, state)
            outs.append(state[0])
        return outs, state


class IAMPolicy(_Base):
    variant = "iam"

    def __init__(self, obs_dim: int, n_actions: int, selector: Module, hidden_dim: int = 64,
                 fnn_widths: Sequence[int] = (128, 128), cell: str = "gru",
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if cell not in CELLS:
            raise ConfigError(f"unknown recurrent cell {cell!r}")
        self.obs_dim, self.n_actions, self.hidden_dim = obs_dim, n_actions, hidden_dim
        self.fnn = MLP(obs_dim, fnn_widths, "tanh", rng=rng)
        self.selector = selector
        self.cell = CELLS[cell](selector.out_dim, hidden_dim, rng)
        feat = self.fnn.out_dim + hidden_dim
        self.pi_head = Dense(feat, n_actions, rng=rng, gain=POLICY_HEAD_GAIN)
        self.v_head = Dense(feat, 1, rng=rng)

    def forward(self, obs, state: tuple, starts=None, ablate_fnn: bool = False,
                ablate_rnn: bool = False) -> PolicyOutput:
        obs = self._check_obs(obs)
        x = self.fnn(obs)
        if ablate_fnn:
            x = x * 0.0
        if self.selector.dynamic:
            def inputs(t, d_prev):
                return self.selector(obs[t], d_prev)
        else:
            dset = self.selector(obs)

            def inputs(t, d_prev):
                return dset[t]
        hs, new_state = self._run_cell(inputs, obs, state, starts)
        d = ag.stack(hs, axis=0)
        if ablate_rnn:
            d = d * 0.0
        logits, value = _heads(self, ag.concat([x, d], axis=-1))
        return PolicyOutput(logits, value, new_state, x, d)


class LSTMPolicy(_Base):
    """Dense encoder (same widths as IAM's feedforward channel), recurrent cell, heads."""

    variant = "lstm"

    def __init__(self, obs_dim: int, n_actions: int, hidden_dim: int = 128,
                 fnn_widths: Sequence[int] = (128, 128), cell: str = "lstm",
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if cell not in CELLS:
            raise ConfigError(f"unknown recurrent cell {cell!r}")
        self.obs_dim, self.n_actions, self.hidden_dim = obs_dim, n_actions, hidden_dim
        self.encoder = MLP(obs_dim, fnn_widths, "tanh", rng=rng)
        self.cell = CELLS[cell](self.encoder.out_dim, hidden_dim, rng)
        self.pi_head = Dense(hidden_dim, n_actions, rng=rng, gain=POLICY_HEAD_GAIN)
        self.v_head = Dense(hidden_dim, 1, rng=rng)

    def forward(self, obs, state: tuple, starts=None) -> PolicyOutput:
        obs = self._check_obs(obs)
        enc = self.encoder(obs)
        hs, new_state = self._run_cell(lambda t, _: enc[t], obs, state, starts)
        h = ag.stack(hs, axis=0)
        logits, value = _heads(self, h)
        return PolicyOutput(logits, value, new_state, enc, h)


class FnnStackPolicy(_Base):
    """Memoryless feedforward policy over ``stack`` concatenated frames."""

    variant = "fnn"
    recurrent = False
    hidden_dim = 0

    def __init__(self, frame_dim: int, n_actions: int, stack: int = 1,
                 fnn_widths: Sequence[int] = (128, 128), rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.frame_dim, self.stack_depth = frame_dim, stack
        self.obs_dim, self.n_actions = frame_dim * stack, n_actions
        self.fnn = MLP(self.obs_dim, fnn_widths, "tanh", rng=rng)
        self.pi_head = Dense(self.fnn.out_dim, n_actions, rng=rng, gain=POLICY_HEAD_GAIN)
        self.v_head = Dense(self.fnn.out_dim, 1, rng=rng)

    def forward(self, obs, state: tuple = (), starts=None) -> PolicyOutput:
        obs = self._check_obs(obs)
        x = self.fnn(obs)
        logits, value = _heads(self, x)
        return PolicyOutput(logits, value, (), x, None)


def iam_forward(net: IAMPolicy, obs: np.ndarray, state: tuple) -> PolicyOutput:
    """Single-step IAM pass on one observation vector (or a ``(B, N)`` batch)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None]
    if obs.shape[-1] != net.obs_dim:
        raise ShapeError(f"IAM expects observations of dim {net.obs_dim}, got {obs.shape[-1]}")
    state = tuple(np.atleast_2d(np.asarray(s.data if isinstance(s, Tensor) else s)) for s in state)
    return net.forward(obs[None], state)


def fnnstack_forward(net: FnnStackPolicy, stacked_obs: np.ndarray) -> PolicyOutput:
    stacked_obs = np.atleast_2d(np.asarray(stacked_obs, dtype=np.float64))
    if stacked_obs.shape[-1] != net.obs_dim:
        raise ShapeError(f"stacked observation must have dim {net.obs_dim} "
                         f"({net.stack_depth} x {net.frame_dim}), got {stacked_obs.shape[-1]}")
    return net.forward(stacked_obs[None])


def initial_state(net, batch: int = 1) -> tuple:
    return net.initial_state(batch)


@dataclass
class ActResult:
    action: np.ndarray
    logprob: np.ndarray
    value: np.ndarray
    new_state: tuple
    features: np.ndarray | None = field(default=None, repr=False)
    memory: np.ndarray | None = field(default=None, repr=False)


def sample_categorical(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw, one uniform per row."""
    cdf = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random(logp.shape[0]) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=-1), logp.shape[-1] - 1)


def act(net, obs: np.ndarray, state: tuple, rng: np.random.Generator | None = None,
        mode: str = "sample") -> ActResult:
    """Choose actions for a ``(B, N)`` batch (or one ``(N,)`` observation)."""
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    if single:
        obs = obs[None]
    with ag.no_grad():
        out = net.forward(obs[None], state)
        logp = ag.log_softmax(out.logits, axis=-1).data[0]
    if mode == "greedy":
        action = np.argmax(logp, axis=-1)
    elif mode == "sample":
        if rng is None:
            raise ContractError("sample mode needs an rng")
        action = sample_categorical(logp, rng)
    else:
        raise ConfigError(f"unknown act mode {mode!r}")
    with ag.no_grad():
        lp = gather_logprob(logp, action).data
    res = ActResult(action, lp, out.value.data[0], tuple(s.data for s in out.new_state),
                    out.features.data[0] if out.features is not None else None,
                    out.memory.data[0] if out.memory is not None else None)
    if single:
        res.action, res.logprob, res.value = int(res.action[0]), float(res.logprob[0]), float(res.value[0])
    return res


@dataclass
class Evaluation:
    logprobs: Tensor   # (T, B)
    values: Tensor     # (T, B)
    entropies: Tensor  # (T, B)
    final_state: tuple


def evaluate_actions(net, obs: np.ndarray, actions: np.ndarray, initial_state: tuple,
                     starts: np.ndarray | None = None, seq_len: int | None = None) -> Evaluation:
    """Re-run the forward recurrence over a chunk on a fresh graph."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 2:
        obs, actions = obs[:, None], np.asarray(actions)[:, None]
        starts = None if starts is None else np.asarray(starts)[:, None]
        initial_state = tuple(np.atleast_2d(s) for s in initial_state)
    T = obs.shape[0]
    if seq_len is not None and T > seq_len:
        raise ContractError(f"chunk length {T} exceeds sequence length {seq_len}")
    if np.asarray(actions).shape != obs.shape[:2]:
        raise ContractError("actions must align with observations")
    out = net.forward(obs, initial_state, starts)
    logp = ag.log_softmax(out.logits, axis=-1)
    lp = gather_logprob(logp, actions)
    ent = -ag.tsum(ag.exp(logp) * logp, axis=-1)
    return Evaluation(lp, out.value, ent, out.new_state)


def build_policy(spec: dict, env, rng: np.random.Generator):
    """Construct a policy from a policy spec dict against an environment's schema."""
    variant = spec.get("variant", "iam")
    widths = tuple(spec.get("fnn_widths", (128, 128)))
    n_obs, n_actions = env.obs_dim, env.n_actions
    if variant == "fnn":
        stack = int(spec.get("stack", 1))
        return FnnStackPolicy(n_obs // stack, n_actions, stack, widths, rng)
    hidden = int(spec.get("hidden", 64))
    if variant == "lstm":
        return LSTMPolicy(n_obs, n_actions, hidden, widths, spec.get("cell", "lstm"), rng)
    if variant != "iam":
        raise ConfigError(f"unknown policy variant {variant!r}")
    kind = spec.get("selector", "manual")
    k = spec.get("dset_size") or len(env.manual_dset)
    if kind == "manual":
        selector = ManualSelector(env.manual_dset, n_obs)
    elif kind == "static":
        selector = StaticSelector(n_obs, int(k), rng)
    elif kind == "dynamic":
        selector = AttentionSelector(n_obs, int(k), hidden, int(spec.get("embed_dim", 4)),
                                     int(spec.get("attention_hidden", 32)), rng)
    else:
        raise ConfigError(f"unknown d-set selector {kind!r}")
    return IAMPolicy(n_obs, n_actions, selector, hidden, widths, spec.get("cell", "gru"), rng)
