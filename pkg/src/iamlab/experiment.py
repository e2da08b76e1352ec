"""Run orchestration: one training run per seed, run records, resumable sweeps."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analysis import load_policy, write_csv
from .config import ExperimentConfig, env_spec, expand_sweep, policy_spec
from .errors import ContractError
from .ppo import evaluate_policy, train

log = logging.getLogger(__name__)

OUT_ENV_VAR = "IAMLAB_OUT"


def output_root(out: str | Path | None = None, config: ExperimentConfig | None = None) -> Path:
    """``--out`` wins, then the config's ``out``, then ``$IAMLAB_OUT``, then ./runs."""
    if out:
        return Path(out)
    if config is not None and config.out:
        return Path(config.out)
    return Path(os.environ.get(OUT_ENV_VAR, "runs"))


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    metrics_path: str
    checkpoint_paths: list
    runtime: float
    final_return: float | None = None
    final_return_std: float | None = None
    cell: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cell_label(config: ExperimentConfig) -> dict:
    p = config.policy
    return {"env": config.env["name"], "variant": p["variant"], "selector": p.get("selector", ""),
            "hidden": p.get("hidden", ""), "stack": p.get("stack", ""),
            "flicker_p": config.env["flicker_p"]}


def train_one(config: ExperimentConfig, seed: int, run_dir: str | Path,
              evaluate: bool = True) -> RunRecord:
    """Train a single seed into ``run_dir`` and write its resolved config and record."""
    run_dir = Path(run_dir)
    single = config.for_seed(seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(single.to_toml())
    result = train(single.ppo_config(seed), policy_spec(single), env_spec(single), run_dir,
                   log=lambda r: log.debug("update %d return %s", r["update"], r["mean_return"]))
    mean = std = None
    if evaluate:
        ev = evaluate_policy(result.policy, env_spec(single), policy_spec(single),
                             single.eval["episodes"], single.eval["mode"], single.eval["seed"])
        mean, std = float(ev.mean()), float(ev.std())
    record = RunRecord(single.config_hash(), int(seed), str(run_dir / "metrics.jsonl"),
                       [str(p) for p in result.checkpoints], result.runtime, mean, std,
                       cell_label(single))
    record.save(run_dir / "run.json")
    log.info("seed %d done in %.1fs, final return %s", seed, result.runtime, mean)
    return record


def train_all(config: ExperimentConfig, out: str | Path) -> list[RunRecord]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(config.to_toml())
    return [train_one(config, s, out / f"seed_{s}") for s in config.seeds]


def ensure_run(config: ExperimentConfig, seed: int, root: str | Path) -> RunRecord:
    """Train ``(config, seed)`` under ``root`` unless a run with the same hash is complete."""
    single = config.for_seed(seed)
    h = single.config_hash()
    run_dir = Path(root) / h[:16]
    done = run_dir / "run.json"
    if done.exists():
        rec = RunRecord.load(done)
        if rec.config_hash == h:
            log.info("skipping completed cell %s", h[:16])
            return rec
    return train_one(single, seed, run_dir)


SUMMARY_HEADER = ["config_hash", "env", "variant", "selector", "hidden", "stack", "flicker_p",
                  "seed", "final_return", "final_return_std", "runtime"]


def sweep(config: ExperimentConfig, out: str | Path) -> list[RunRecord]:
    """Run every grid cell not already completed; cells are keyed by config hash."""
    out = Path(out)
    cells = expand_sweep(config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(config.to_toml())
    records = [ensure_run(cell, cell.seeds[0], out / "cells") for cell in cells]
    write_summary(records, out / "summary.csv")
    return records


def write_summary(records, path: str | Path) -> Path:
    rows = [[r.config_hash, *(r.cell.get(k, "") for k in SUMMARY_HEADER[1:7]), r.seed,
             r.final_return, r.final_return_std, r.runtime] for r in records]
    return write_csv(path, SUMMARY_HEADER, rows)


def evaluate_checkpoint(config: ExperimentConfig, checkpoint: str | Path, episodes: int,
                        mode: str, seed: int) -> np.ndarray:
    if episodes < 1:
        raise ContractError("evaluation needs at least one episode")
    policy = load_policy(checkpoint, policy_spec(config), env_spec(config))
    return evaluate_policy(policy, env_spec(config), policy_spec(config), episodes, mode, seed)


def steps_to_fraction(metrics: list[dict], frac: float = 0.9, window: int = 5,
                      tail: int = 10) -> int | None:
    """First env step at which the smoothed curve covers ``frac`` of its total climb.

    The climb runs from the curve's opening level (mean of the first ``window``
    logged returns) to its final level (mean of the last ``tail``).  Measuring
    progress from the start keeps the criterion meaningful for negative
    returns, where "90% of the final return" alone would lie above the final.
    Returns ``None`` for a curve that never improved.
    """
    pts = [(m["env_steps"], m["mean_return"]) for m in metrics if m.get("mean_return") is not None]
    if len(pts) < max(window, tail):
        raise ContractError("curve too short to measure convergence")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts], dtype=float)
    smooth = np.convolve(y, np.ones(window) / window, mode="valid")
    start, final = smooth[0], y[-tail:].mean()
    if final <= start:
        return None
    hit = np.flatnonzero(smooth >= start + frac * (final - start))
    return int(x[window - 1 + hit[0]])
