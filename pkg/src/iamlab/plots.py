"""SVG figures: learning curves with seed bands, and canonical-variate scatters."""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ContractError  # noqa: E402


def stack_curves(runs: Sequence[Sequence[dict]], metric: str = "mean_return"):
    """Align per-update records from several seeds; x axes must agree exactly."""
    if not runs:
        raise ContractError("need at least one metrics file")
    xs = [np.array([r["env_steps"] for r in run]) for run in runs]
    for x in xs[1:]:
        if x.shape != xs[0].shape or not np.array_equal(x, xs[0]):
            raise ContractError("metrics files have mismatched env-step axes")
    ys = np.array([[np.nan if r.get(metric) is None else r[metric] for r in run] for run in runs],
                  dtype=float)
    return xs[0], ys


def plot_curves(series: Mapping[str, Sequence[Sequence[dict]]], path: str | Path,
                metric: str = "mean_return", references: Mapping[str, float] | None = None,
                title: str = "") -> Path:
    """Mean line per series, a +-1 std band when there are several seeds, dashed references."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, runs in series.items():
        x, ys = stack_curves(runs, metric)
        with warnings.catch_warnings():
            # updates before any episode finished are nan for every seed
            warnings.simplefilter("ignore", RuntimeWarning)
            mean, sd = np.nanmean(ys, axis=0), np.nanstd(ys, axis=0)
        (line,) = ax.plot(x, mean, label=label)
        if len(ys) > 1:
            ax.fill_between(x, mean - sd, mean + sd, color=line.get_color(), alpha=0.2, linewidth=0)
    for label, value in (references or {}).items():
        ax.axhline(value, linestyle="--", color="k", linewidth=1, label=label)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(metric.replace("_", " "))
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_canonical_scatter(u: np.ndarray, v: np.ndarray, correlations: np.ndarray,
                           path: str | Path, n: int = 2, target_name: str = "feature") -> Path:
    """Scatter the leading canonical variate pairs of memory against hidden features."""
    n = max(1, min(n, u.shape[1]))
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for i, ax in enumerate(axes[0]):
        ax.scatter(u[:, i], v[:, i], s=3, alpha=0.3)
        ax.set_title(f"pair {i + 1}, r = {correlations[i]:.3f}")
        ax.set_xlabel("memory variate")
        ax.set_ylabel(f"{target_name} variate")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
