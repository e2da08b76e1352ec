"""Recurrent PPO: chunked rollouts, GAE, clipped surrogate, Adam.

Rollouts are cut into chunks of ``seq_len`` steps per worker.  The recurrent
state entering each chunk is stored at collection time and treated as a
constant during updates, so gradients never cross chunk boundaries.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .envs import make_env
from .errors import ConfigError, ContractError, NumericError
from .policies import act, build_policy, evaluate_actions

# -- configuration -----------------------------------------------------------


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    lr: float = 2.5e-4
    max_grad_norm: float = 0.5
    rollout: int = 128
    workers: int = 8
    seq_len: int = 8
    total_steps: int = 300_000
    seed: int = 0
    checkpoint_every: int = 0
    reward_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.clip <= 0:
            raise ConfigError("clip epsilon must be positive")
        if self.seq_len < 1:
            raise ConfigError("sequence length must be >= 1")
        if self.rollout % self.seq_len:
            raise ConfigError("rollout length must be a multiple of the sequence length")
        n_chunks = self.workers * self.rollout // self.seq_len
        if self.minibatches < 1 or n_chunks < self.minibatches:
            raise ConfigError(f"{n_chunks} chunks cannot fill {self.minibatches} minibatches")
        if self.reward_scale <= 0:
            raise ConfigError("reward_scale must be positive")
        if self.lr < 0 or self.max_grad_norm <= 0:
            raise ConfigError("lr must be >= 0 and max_grad_norm > 0")

    @property
    def num_updates(self) -> int:
        return max(1, self.total_steps // (self.rollout * self.workers))


# -- rollout collection ------------------------------------------------------


class Runner:
    """Holds the live environments and recurrent state between rollouts."""

    def __init__(self, envs: Sequence, policy):
        self.envs = list(envs)
        self.policy = policy
        self.obs = np.stack([env.reset() for env in self.envs])
        self.starts = np.ones(len(self.envs))
        self.state = policy.initial_state(len(self.envs))
        self.ep_returns = np.zeros(len(self.envs))
        self.ep_lengths = np.zeros(len(self.envs), dtype=np.int64)

    @property
    def n_workers(self) -> int:
        return len(self.envs)


@dataclass
class RolloutBuffer:
    obs: np.ndarray          # (T, B, N)
    actions: np.ndarray      # (T, B)
    rewards: np.ndarray      # (T, B)
    dones: np.ndarray        # (T, B): episode ended after this step
    starts: np.ndarray       # (T, B): this step opens an episode
    logprobs: np.ndarray     # (T, B)
    values: np.ndarray       # (T, B)
    bootstrap: np.ndarray    # (B,) value of the observation after the last step
    chunk_states: list       # per chunk index: tuple of (B, H) arrays
    seq_len: int
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return self.obs.shape[0]

    @property
    def n_workers(self) -> int:
        return self.obs.shape[1]

    @property
    def n_chunks(self) -> int:
        return self.n_steps // self.seq_len

    def chunk(self, c: int, workers) -> dict:
        """Steps ``[c*L, (c+1)*L)`` for the given workers, time-major."""
        sl = slice(c * self.seq_len, (c + 1) * self.seq_len)
        workers = np.asarray(workers)
        out = {
            "obs": self.obs[sl][:, workers],
            "actions": self.actions[sl][:, workers],
            "starts": self.starts[sl][:, workers],
            "logprobs": self.logprobs[sl][:, workers],
            "values": self.values[sl][:, workers],
            "state": tuple(s[workers] for s in self.chunk_states[c]),
        }
        if self.advantages is not None:
            out["advantages"] = self.advantages[sl][:, workers]
            out["returns"] = self.returns[sl][:, workers]
        return out


def collect_rollout(policy, runner: Runner, n_steps: int, rng: np.random.Generator,
                    seq_len: int) -> RolloutBuffer:
    if n_steps % seq_len:
        raise ContractError("rollout length must be a multiple of the sequence length")
    B, N = runner.obs.shape
    obs = np.zeros((n_steps, B, N))
    actions = np.zeros((n_steps, B), dtype=np.int64)
    rewards, dones, starts = (np.zeros((n_steps, B)) for _ in range(3))
    logprobs, values = np.zeros((n_steps, B)), np.zeros((n_steps, B))
    chunk_states, ep_returns, ep_lengths = [], [], []
    state = runner.state
    for t in range(n_steps):
        keep = (1.0 - runner.starts)[:, None]
        state = tuple(s * keep for s in state)
        if t % seq_len == 0:
            chunk_states.append(tuple(s.copy() for s in state))
        res = act(policy, runner.obs, state, rng, "sample")
        obs[t], starts[t] = runner.obs, runner.starts
        actions[t], logprobs[t], values[t] = res.action, res.logprob, res.value
        next_obs = np.empty_like(runner.obs)
        for b, env in enumerate(runner.envs):
            step = env.step(int(res.action[b]))
            rewards[t, b] = step.reward
            runner.ep_returns[b] += step.reward
            runner.ep_lengths[b] += 1
            if step.done:
                dones[t, b] = 1.0
                ep_returns.append(float(runner.ep_returns[b]))
                ep_lengths.append(int(runner.ep_lengths[b]))
                runner.ep_returns[b], runner.ep_lengths[b] = 0.0, 0
                next_obs[b] = env.reset()
            else:
                next_obs[b] = step.observation
        runner.obs, runner.starts = next_obs, dones[t].copy()
        state = res.new_state
    runner.state = state
    keep = (1.0 - runner.starts)[:, None]
    with ag.no_grad():
        boot = policy.forward(runner.obs[None], tuple(s * keep for s in state)).value.data[0]
    return RolloutBuffer(obs, actions, rewards, dones, starts, logprobs, values, boot.copy(),
                         chunk_states, seq_len, ep_returns, ep_lengths)


# -- advantages ----------------------------------------------------------------


def compute_gae(rewards, values, dones, bootstrap, gamma: float, lam: float):
    """Generalised advantage estimates and returns; time is the leading axis."""
    rewards, values, dones = (np.asarray(a, dtype=np.float64) for a in (rewards, values, dones))
    if not rewards.shape == values.shape == dones.shape:
        raise ContractError("rewards, values and dones must have equal shapes")
    bootstrap = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), rewards.shape[1:])
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(bootstrap)
    next_value = bootstrap
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(adv.std(), 1e-8)


# -- loss ----------------------------------------------------------------------


def ppo_loss(policy, minibatch: dict, config: PpoConfig) -> tuple[Tensor, dict]:
    """Clipped surrogate + value MSE − entropy bonus over one minibatch of chunks."""
    ev = evaluate_actions(policy, minibatch["obs"], minibatch["actions"], minibatch["state"],
                          minibatch["starts"], config.seq_len)
    adv = np.asarray(minibatch["advantages"], dtype=np.float64)
    ratio = ag.exp(ev.logprobs - minibatch["logprobs"])
    surr = ag.minimum(ratio * adv, ag.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv)
    policy_loss = -ag.mean(surr)
    err = ev.values - minibatch["returns"]
    value_loss = ag.mean(err * err)
    entropy = ag.mean(ev.entropies)
    loss = policy_loss + config.vf_coef * value_loss - config.ent_coef * entropy
    r = ratio.data
    stats = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "approx_kl": float(np.mean((r - 1.0) - np.log(r))),
        "clip_frac": float(np.mean(np.abs(r - 1.0) > config.clip)),
    }
    return loss, stats


# -- optimiser -----------------------------------------------------------------


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads: Sequence[np.ndarray], cap: float) -> tuple[list, float]:
    norm = global_norm(grads)
    if cap is not None and norm > cap:
        scale = cap / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 2.5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> float:
        """Apply one update; ``grads`` is a list aligned with params or a ``{param: grad}`` map.

        Returns the pre-clipping global gradient norm.
        """
        if isinstance(grads, dict):
            grads = [grads[p] for p in self.params]
        grads = list(grads)
        if len(grads) != len(self.params) or any(
                np.shape(g) != p.data.shape for g, p in zip(grads, self.params)):
            raise ContractError("gradients do not match parameter shapes")
        grads, norm = clip_by_global_norm(grads, self.max_grad_norm)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def adam_step(params, grads, optimizer: Adam, lr: float | None = None) -> list[Tensor]:
    if lr is not None:
        optimizer.lr = lr
    optimizer.step(grads)
    return optimizer.params


# -- training --------------------------------------------------------------------


def env_kwargs(env_spec: dict) -> tuple[str, dict]:
    spec = dict(env_spec)
    name = spec.pop("name")
    return name, {k: v for k, v in spec.items() if v is not None}


def make_env_fn(env_spec: dict, policy_spec: dict) -> Callable[[np.random.Generator], object]:
    name, kwargs = env_kwargs(env_spec)
    stack = int(policy_spec.get("stack", 1)) if policy_spec.get("variant") == "fnn" else 1

    def factory(rng: np.random.Generator):
        return make_env(name, rng, stack=stack, **kwargs)

    return factory


def seed_streams(seed: int, n_workers: int) -> dict:
    root = np.random.SeedSequence(seed)
    init_ss, env_ss, act_ss, shuffle_ss = root.spawn(4)
    return {
        "init": np.random.default_rng(init_ss),
        "envs": [np.random.default_rng(s) for s in env_ss.spawn(n_workers)],
        "act": np.random.default_rng(act_ss),
        "shuffle": np.random.default_rng(shuffle_ss),
    }


@dataclass
class TrainResult:
    policy: object
    metrics: list
    checkpoints: list
    runtime: float


def _mean_std(xs) -> tuple:
    if not xs:
        return None, None
    return float(np.mean(xs)), float(np.std(xs))


def ppo_update(policy, optimizer: Adam, buf: RolloutBuffer, config: PpoConfig,
               rng: np.random.Generator) -> dict:
    # the value head learns returns in scaled units; logged returns stay raw
    adv, ret = compute_gae(buf.rewards * config.reward_scale, buf.values, buf.dones,
                           buf.bootstrap, config.gamma, config.lam)
    buf.advantages, buf.returns = normalize_advantages(adv), ret
    params = optimizer.params
    ids = [(c, b) for c in range(buf.n_chunks) for b in range(buf.n_workers)]
    totals: dict[str, float] = {}
    n = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(ids))
        for part in np.array_split(order, config.minibatches):
            pairs = [ids[i] for i in part]
            mb = _gather(buf, pairs)
            loss, stats = ppo_loss(policy, mb, config)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite PPO loss: {stats}")
            grads = ag.backward(loss, params)
            stats["grad_norm"] = optimizer.step(grads)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            n += 1
    return {k: v / n for k, v in totals.items()}


def _gather(buf: RolloutBuffer, pairs) -> dict:
    """Stack chunks ``(c, b)`` side by side along the batch axis."""
    L = buf.seq_len
    cs = np.array([c for c, _ in pairs])
    bs = np.array([b for _, b in pairs])
    steps = cs[None, :] * L + np.arange(L)[:, None]        # (L, M)
    n_state = len(buf.chunk_states[0])
    state = tuple(np.stack([buf.chunk_states[c][k][b] for c, b in pairs]) for k in range(n_state))
    return {
        "obs": buf.obs[steps, bs[None, :]],
        "actions": buf.actions[steps, bs[None, :]],
        "starts": buf.starts[steps, bs[None, :]],
        "logprobs": buf.logprobs[steps, bs[None, :]],
        "advantages": buf.advantages[steps, bs[None, :]],
        "returns": buf.returns[steps, bs[None, :]],
        "state": state,
    }


def train(config: PpoConfig, policy_spec: dict, env_spec: dict, out_dir: str | Path | None = None,
          log: Callable[[dict], None] | None = None) -> TrainResult:
    """Alternate rollout collection and PPO epochs; deterministic given ``config.seed``."""
    from .checkpoint import save_checkpoint

    t0 = time.perf_counter()
    streams = seed_streams(config.seed, config.workers)
    factory = make_env_fn(env_spec, policy_spec)
    envs = [factory(r) for r in streams["envs"]]
    policy = build_policy(policy_spec, envs[0], streams["init"])
    optimizer = Adam(policy.parameters(), config.lr, max_grad_norm=config.max_grad_norm)
    runner = Runner(envs, policy)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = (out / "metrics.jsonl").open("w")
    metrics, checkpoints = [], []
    try:
        for update in range(1, config.num_updates + 1):
            buf = collect_rollout(policy, runner, config.rollout, streams["act"], config.seq_len)
            try:
                stats = ppo_update(policy, optimizer, buf, config, streams["shuffle"])
            except NumericError as exc:
                if out is not None:
                    dump = {"update": update, "error": str(exc), "recent_metrics": metrics[-5:],
                            "param_norms": {n: float(np.linalg.norm(p.data))
                                            for n, p in policy.named_parameters()}}
                    (out / "diagnostic.json").write_text(json.dumps(dump, indent=2))
                raise
            mean_ret, std_ret = _mean_std(buf.episode_returns)
            record = {
                "update": update,
                "env_steps": update * config.rollout * config.workers,
                "mean_return": mean_ret,
                "std_return": std_ret,
                "episodes": len(buf.episode_returns),
                **stats,
                "param_norm": global_norm([p.data for p in policy.parameters()]),
            }
            metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
            if log is not None:
                log(record)
            if out is not None and config.checkpoint_every and update % config.checkpoint_every == 0:
                checkpoints.append(save_checkpoint(policy.state_dict(), out / f"ckpt_{update:05d}.bin"))
        if out is not None:
            checkpoints.append(save_checkpoint(policy.state_dict(), out / "ckpt_final.bin"))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(policy, metrics, checkpoints, time.perf_counter() - t0)


# -- evaluation ------------------------------------------------------------------


def run_episodes(policy, env_fn: Callable, episodes: int, rng: np.random.Generator,
                 mode: str = "sample", batch: int = 16, record: bool = False):
    """Run ``episodes`` full episodes in lock-step batches.

    Returns per-episode returns, plus per-step records when ``record`` is set
    (features, memory, hidden-state info and observation for each step).
    """
    if episodes < 1:
        raise ContractError("need at least one episode")
    returns, records = [], []
    env_rngs = rng.spawn(episodes)
    act_rng = rng.spawn(1)[0]
    ep = 0
    while ep < episodes:
        n = min(batch, episodes - ep)
        envs = [env_fn(env_rngs[ep + i]) for i in range(n)]
        obs = np.stack([e.reset() for e in envs])
        infos = [e.info() for e in envs] if record else None
        state = policy.initial_state(n)
        alive = np.ones(n, dtype=bool)
        totals = np.zeros(n)
        t = 0
        while alive.any():
            res = act(policy, obs, state, act_rng, mode)
            next_obs = obs.copy()
            for i, env in enumerate(envs):
                if not alive[i]:
                    continue
                step = env.step(int(res.action[i]))
                totals[i] += step.reward
                if record:
                    # ``info`` is the hidden state behind ``obs``; ``next_info`` follows the action
                    records.append({
                        "episode": ep + i, "t": t, "obs": obs[i].copy(), "action": int(res.action[i]),
                        "reward": step.reward, "done": step.done, "info": infos[i],
                        "next_info": step.info,
                        "features": None if res.features is None else res.features[i].copy(),
                        "memory": None if res.memory is None else res.memory[i].copy(),
                    })
                next_obs[i] = step.observation
                if record:
                    infos[i] = step.info
                if step.done:
                    alive[i] = False
            obs, state, t = next_obs, res.new_state, t + 1
        returns.extend(totals.tolist())
        ep += n
    returns = np.array(returns)
    return (returns, records) if record else returns


def evaluate_policy(policy, env_spec: dict, policy_spec: dict, episodes: int = 100,
                    mode: str = "sample", seed: int = 12345, batch: int = 16) -> np.ndarray:
    return run_episodes(policy, make_env_fn(env_spec, policy_spec), episodes,
                        np.random.default_rng(seed), mode, batch)
