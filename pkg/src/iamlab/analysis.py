"""What does the memory hold?  Activation datasets, CCA, decoders and probes.

A trained policy is run for a number of episodes while its feedforward output
``x_t``, its memory ``d_t`` and the simulator's hidden variables are recorded
side by side.  The hidden variables only come from ``EnvStep.info`` and never
enter a policy input.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_checkpoint
from .errors import CheckpointError, ContractError, NumericError
from .layers import MLP, Dense, Module
from .ppo import Adam, make_env_fn, run_episodes

# -- datasets ----------------------------------------------------------------


@dataclass
class ActivationDataset:
    features: np.ndarray        # x_t, (n, F)
    memory: np.ndarray          # d_t, (n, H); zero columns for memoryless nets
    targets: np.ndarray         # ground-truth hidden quantities, (n, M)
    episode: np.ndarray         # (n,)
    step: np.ndarray            # (n,)
    target_name: str = "targets"
    hidden_columns: np.ndarray | None = None   # target columns the agent never observes

    def __post_init__(self):
        n = len(self.episode)
        if not (len(self.features) == len(self.memory) == len(self.targets) == len(self.step) == n):
            raise ContractError("activation dataset columns must have equal row counts")

    def __len__(self) -> int:
        return len(self.episode)

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.features, self.memory], axis=1)

    def subset(self, rows: np.ndarray) -> "ActivationDataset":
        return ActivationDataset(self.features[rows], self.memory[rows], self.targets[rows],
                                 self.episode[rows], self.step[rows], self.target_name,
                                 self.hidden_columns)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        extra = {} if self.hidden_columns is None else {"hidden_columns": self.hidden_columns}
        np.savez(path, features=self.features, memory=self.memory, targets=self.targets,
                 episode=self.episode, step=self.step, target_name=np.array(self.target_name),
                 **extra)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ActivationDataset":
        with np.load(path) as z:
            hidden = z["hidden_columns"] if "hidden_columns" in z.files else None
            return cls(z["features"], z["memory"], z["targets"], z["episode"], z["step"],
                       str(z["target_name"]), hidden)


def load_policy(checkpoint: str | Path | dict, policy_spec: dict, env_spec: dict):
    """Rebuild a policy from its spec and load trained weights into it."""
    from .policies import build_policy

    env = make_env_fn(env_spec, policy_spec)(np.random.default_rng(0))
    policy = build_policy(policy_spec, env, np.random.default_rng(0))
    arrays = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    try:
        policy.load_state_dict(arrays)
    except CheckpointError as exc:
        raise ContractError(f"checkpoint does not fit this policy/environment: {exc}") from exc
    return policy


def collect_activations(policy, env_spec: dict, policy_spec: dict, episodes: int,
                        seed: int = 0, mode: str = "greedy") -> ActivationDataset:
    """Roll out ``policy`` and record ``x_t``, ``d_t`` and the hidden state behind ``o_t``."""
    env_fn = make_env_fn(env_spec, policy_spec)
    probe_env = env_fn(np.random.default_rng(0))
    name = probe_env.feature_name
    _, records = run_episodes(policy, env_fn, episodes, np.random.default_rng(seed), mode,
                              record=True)
    records.sort(key=lambda r: (r["episode"], r["t"]))
    feats = np.stack([r["features"] for r in records])
    if records[0]["memory"] is None:
        mem = np.zeros((len(records), 0))
    else:
        mem = np.stack([r["memory"] for r in records])
    targets = np.stack([np.asarray(r["info"][name], dtype=np.float64) for r in records])
    hidden = getattr(probe_env, "hidden_features", None)
    return ActivationDataset(feats, mem, targets,
                             np.array([r["episode"] for r in records]),
                             np.array([r["t"] for r in records]), name,
                             None if hidden is None else np.asarray(hidden))


def episode_split(episodes: np.ndarray, test_frac: float, rng: np.random.Generator):
    """Boolean train/test row masks with whole episodes on one side."""
    ids = np.unique(episodes)
    if len(ids) < 2:
        raise ContractError("need at least two episodes for an episode-disjoint split")
    n_test = min(max(1, int(round(test_frac * len(ids)))), len(ids) - 1)
    test_ids = rng.permutation(ids)[:n_test]
    test = np.isin(episodes, test_ids)
    return ~test, test


# -- canonical correlation -----------------------------------------------------


@dataclass
class CcaResult:
    correlations: np.ndarray    # descending, in [0, 1]
    x_weights: np.ndarray       # (p, k)
    y_weights: np.ndarray       # (q, k)
    ridge: float
    x_mean: np.ndarray = field(repr=False, default=None)
    y_mean: np.ndarray = field(repr=False, default=None)

    def transform(self, X, Y) -> tuple[np.ndarray, np.ndarray]:
        return (np.asarray(X) - self.x_mean) @ self.x_weights, (np.asarray(Y) - self.y_mean) @ self.y_weights


def _inv_sqrt(S: np.ndarray, ridge: float, which: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    tol = max(vals.max(), 1e-300) * S.shape[0] * np.finfo(float).eps * 10
    if vals.min() <= tol:
        if ridge == 0:
            raise NumericError(f"covariance of {which} is rank deficient; use a ridge r > 0")
        raise NumericError(f"covariance of {which} is singular even with ridge {ridge}")
    return (vecs / np.sqrt(vals)) @ vecs.T


def cca_fit(X, Y, ridge: float = 1e-3) -> CcaResult:
    """Regularised CCA via whitening.

    The correlations are the singular values of
    ``(Sxx + rI)^-1/2 Sxy (Syy + rI)^-1/2``.
    """
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ContractError("CCA needs two 2-D views with the same number of rows")
    n, p = X.shape
    q = Y.shape[1]
    if n <= max(p, q):
        raise ContractError(f"CCA needs more rows ({n}) than columns ({max(p, q)})")
    if ridge < 0:
        raise ContractError("ridge must be >= 0")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    Sxx = Xc.T @ Xc / (n - 1) + ridge * np.eye(p)
    Syy = Yc.T @ Yc / (n - 1) + ridge * np.eye(q)
    Sxy = Xc.T @ Yc / (n - 1)
    Wx, Wy = _inv_sqrt(Sxx, ridge, "X"), _inv_sqrt(Syy, ridge, "Y")
    U, s, Vt = np.linalg.svd(Wx @ Sxy @ Wy, full_matrices=False)
    return CcaResult(np.clip(s, 0.0, 1.0), Wx @ U, Wy @ Vt.T, ridge, mx, my)


# -- memory decoder ----------------------------------------------------------


class Decoder(Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.body = MLP(in_dim, (hidden,), "tanh", rng=rng)
        self.out = Dense(hidden, out_dim, rng=rng)
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x) -> Tensor:
        return self.out(self.body(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return (self(x).data > 0.0).astype(np.float64)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, computed as a two-class log-softmax for stability."""
    zeros = Tensor(np.zeros(logits.shape))
    logp = ag.log_softmax(ag.stack([zeros, logits], axis=-1), axis=-1)
    onehot = np.stack([1.0 - targets, targets], axis=-1)
    return -ag.mean(ag.tsum(logp * onehot, axis=-1))


@dataclass
class DecoderResult:
    model: Decoder
    accuracy: float             # test accuracy over the scored (hidden) cells
    baseline_accuracy: float    # per-cell majority class from the training split
    p_value: float              # bootstrap over test episodes of accuracy - baseline
    per_cell_accuracy: np.ndarray
    per_cell_baseline: np.ndarray
    columns: np.ndarray
    train_episodes: np.ndarray
    test_episodes: np.ndarray
    losses: list


def _standardise(train: np.ndarray, *others: np.ndarray):
    mu, sd = train.mean(axis=0), train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return [(a - mu) / sd for a in (train, *others)]


def _bootstrap_p(diffs: np.ndarray, rng: np.random.Generator, n_boot: int) -> float:
    """One-sided p-value that the mean per-episode difference is <= 0."""
    idx = rng.integers(len(diffs), size=(n_boot, len(diffs)))
    means = diffs[idx].mean(axis=1)
    return float((1 + np.sum(means <= 0.0)) / (1 + n_boot))


def train_memory_decoder(dataset: ActivationDataset, hidden: int = 64, epochs: int = 200,
                         rng: np.random.Generator | None = None, lr: float = 3e-3,
                         batch_size: int = 256, test_frac: float = 0.2,
                         columns: Sequence[int] | None = None, n_boot: int = 1999) -> DecoderResult:
    """Fit an MLP from ``[x_t, d_t]`` to every target cell; score the hidden ones.

    ``columns`` picks the scored cells (default: ``dataset.hidden_columns``,
    else all of them).
    """
    if len(dataset) == 0:
        raise ContractError("empty activation dataset")
    rng = rng or np.random.default_rng(0)
    tr, te = episode_split(dataset.episode, test_frac, rng)
    Y = (np.asarray(dataset.targets) > 0.5).astype(np.float64)
    Xtr, Xte = _standardise(dataset.inputs[tr], dataset.inputs[te])
    Ytr, Yte = Y[tr], Y[te]
    if columns is None:
        columns = dataset.hidden_columns if dataset.hidden_columns is not None else np.arange(Y.shape[1])
    columns = np.asarray(columns)

    model = Decoder(Xtr.shape[1], Y.shape[1], hidden, rng)
    opt = Adam(model.parameters(), lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(Xtr))
        total = 0.0
        for start in range(0, len(order), batch_size):
            rows = order[start:start + batch_size]
            loss = bce_with_logits(model(Xtr[rows]), Ytr[rows])
            opt.step(ag.backward(loss, opt.params))
            total += float(loss.data) * len(rows)
        losses.append(total / len(order))

    majority = (Ytr.mean(axis=0) > 0.5).astype(np.float64)
    pred = model.predict(Xte)
    hit = (pred[:, columns] == Yte[:, columns])
    base_hit = (majority[columns][None, :] == Yte[:, columns])
    test_eps = np.unique(dataset.episode[te])
    ep_of_row = dataset.episode[te]
    diffs = np.array([hit[ep_of_row == e].mean() - base_hit[ep_of_row == e].mean() for e in test_eps])
    return DecoderResult(model, float(hit.mean()), float(base_hit.mean()),
                         _bootstrap_p(diffs, rng, n_boot), hit.mean(axis=0), base_hit.mean(axis=0),
                         columns, np.unique(dataset.episode[tr]), test_eps, losses)


# -- linear probe --------------------------------------------------------------


@dataclass
class ProbeResult:
    r2: np.ndarray              # per target, held-out; nan where the test target is constant
    mean_r2: float
    null_mean_r2: np.ndarray    # permutation null distribution of mean_r2
    p_value: float
    ridge: float


def _ridge_r2(Xtr, Ytr, Xte, Yte, ridge: float) -> np.ndarray:
    mu_x, mu_y = Xtr.mean(axis=0), Ytr.mean(axis=0)
    A, B = Xtr - mu_x, Ytr - mu_y
    W = np.linalg.solve(A.T @ A + ridge * len(A) * np.eye(A.shape[1]), A.T @ B)
    pred = (Xte - mu_x) @ W + mu_y
    ss_res = ((Yte - pred) ** 2).sum(axis=0)
    ss_tot = ((Yte - Yte.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(ss_tot > 1e-12, 1.0 - ss_res / np.where(ss_tot > 1e-12, ss_tot, 1.0), np.nan)


def linear_probe(activations, targets, episodes, ridge: float = 1e-3,
                 rng: np.random.Generator | None = None, test_frac: float = 0.2,
                 n_permutations: int = 199) -> ProbeResult:
    """Ridge regression from activations to each target; R² on held-out episodes.

    The null permutes target rows against activations (within the train and
    test splits separately) and refits.
    """
    X = np.asarray(activations, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    episodes = np.asarray(episodes)
    if not len(X) == len(Y) == len(episodes):
        raise ContractError("activations, targets and episode ids must align")
    rng = rng or np.random.default_rng(0)
    tr, te = episode_split(episodes, test_frac, rng)
    if tr.sum() <= X.shape[1] + 1 or te.sum() < 2:
        raise ContractError(f"too few rows ({tr.sum()} train, {te.sum()} test) for "
                            f"{X.shape[1]} activation dimensions")
    Xtr, Xte = _standardise(X[tr], X[te])
    r2 = _ridge_r2(Xtr, Y[tr], Xte, Y[te], ridge)
    mean_r2 = float(np.nanmean(r2)) if np.isfinite(r2).any() else float("nan")
    null = np.empty(n_permutations)
    for k in range(n_permutations):
        null[k] = np.nanmean(_ridge_r2(Xtr, Y[tr][rng.permutation(tr.sum())], Xte,
                                        Y[te][rng.permutation(te.sum())], ridge))
    p = float((1 + np.sum(null >= mean_r2)) / (1 + n_permutations))
    return ProbeResult(r2, mean_r2, null, p, ridge)


# -- tables ----------------------------------------------------------------------


def write_csv(path: str | Path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else
                        int(v) if isinstance(v, np.integer) else v for v in row])
    return path
