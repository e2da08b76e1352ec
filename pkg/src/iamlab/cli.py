"""Command line entry point: ``iamlab <subcommand> [options]``.

Subcommands: train, evaluate, sweep, plot, analyze-cca, decode-memory, probe.
Outputs go under ``--out``, else the config's ``out``, else ``$IAMLAB_OUT``,
else ``./runs``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import ExperimentConfig, env_spec, load_config, policy_spec
from .errors import ConfigError, ContractError, IamLabError
from .experiment import (evaluate_checkpoint, output_root, read_metrics, sweep, train_all,
                         write_summary)

log = logging.getLogger("iamlab")


def _config(args) -> ExperimentConfig:
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        sibling = Path(args.checkpoint).parent / "config.toml"
        path = sibling if sibling.exists() else None
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None and args.command in ("train", "sweep"):
        overrides.append(f"seeds=[{int(args.seed)}]")
    return load_config(path, overrides)


def cmd_train(args) -> int:
    config = _config(args)
    out = output_root(args.out, config)
    records = train_all(config, out)
    write_summary(records, out / "summary.csv")
    for r in records:
        print(f"seed {r.seed}: final return {r.final_return:.3f} +- {r.final_return_std:.3f} "
              f"({r.runtime:.1f}s) -> {Path(r.metrics_path).parent}")
    return 0


def cmd_evaluate(args) -> int:
    config = _config(args)
    seed = config.eval["seed"] if args.seed is None else args.seed
    mode = args.mode or config.eval["mode"]
    returns = evaluate_checkpoint(config, args.checkpoint, args.episodes, mode, seed)
    out = output_root(args.out, config)
    path = analysis.write_csv(out / "evaluation.csv",
                              ["checkpoint", "env", "mode", "episodes", "mean_return", "std_return"],
                              [[args.checkpoint, config.env["name"], mode, len(returns),
                                float(returns.mean()), float(returns.std())]])
    print(f"mean return {returns.mean():.3f} +- {returns.std():.3f} over {len(returns)} "
          f"{mode} episodes -> {path}")
    return 0


def cmd_sweep(args) -> int:
    config = _config(args)
    out = output_root(args.out, config)
    records = sweep(config, out)
    print(f"{len(records)} cells complete -> {out / 'summary.csv'}")
    return 0


def _parse_pairs(items, what: str) -> list[tuple[str, str]]:
    pairs = []
    for item in items or ():
        label, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"{what} {item!r} is not of the form label=value")
        pairs.append((label, value))
    return pairs


def _metrics_file(path: str) -> Path:
    p = Path(path)
    return p / "metrics.jsonl" if p.is_dir() else p


def cmd_plot(args) -> int:
    from .plots import plot_curves

    series = {}
    for label, files in _parse_pairs(args.series, "--series"):
        series[label] = [read_metrics(_metrics_file(f)) for f in files.split(",") if f]
    if args.files:
        series[args.label] = [read_metrics(_metrics_file(f)) for f in args.files]
    if not series:
        raise ContractError("plot needs at least one metrics file")
    refs = {label: float(v) for label, v in _parse_pairs(args.reference, "--reference")}
    out = Path(args.out) if args.out and args.out.endswith(".svg") else \
        output_root(args.out) / "learning_curves.svg"
    path = plot_curves(series, out, args.metric, refs, args.title)
    print(f"wrote {path}")
    return 0


def _dataset(args, config: ExperimentConfig, out: Path) -> analysis.ActivationDataset:
    if args.dataset:
        return analysis.ActivationDataset.load(args.dataset)
    if not args.checkpoint:
        raise ContractError("need --checkpoint (or --dataset) to analyse a policy")
    policy = analysis.load_policy(args.checkpoint, policy_spec(config), env_spec(config))
    ds = analysis.collect_activations(policy, env_spec(config), policy_spec(config),
                                      args.episodes, seed=args.seed or 0, mode="greedy")
    ds.save(out / "activations.npz")
    return ds


def _hidden_targets(ds: analysis.ActivationDataset) -> np.ndarray:
    if ds.hidden_columns is None:
        return ds.targets
    return ds.targets[:, ds.hidden_columns]


def cmd_cca(args) -> int:
    from .plots import plot_canonical_scatter

    config = _config(args)
    out = output_root(args.out, config)
    ds = _dataset(args, config, out)
    if ds.memory.shape[1] == 0:
        raise ContractError("this policy has no recurrent memory to analyse")
    Y = _hidden_targets(ds)
    res = analysis.cca_fit(ds.memory, Y, ridge=args.ridge)
    analysis.write_csv(out / "cca.csv", ["component", "correlation"],
                       [[i + 1, c] for i, c in enumerate(res.correlations)])
    u, v = res.transform(ds.memory, Y)
    plot_canonical_scatter(u, v, res.correlations, out / "cca.svg", target_name=ds.target_name)
    print("canonical correlations: " + " ".join(f"{c:.3f}" for c in res.correlations[:5]))
    return 0


def cmd_decode(args) -> int:
    config = _config(args)
    out = output_root(args.out, config)
    ds = _dataset(args, config, out)
    res = analysis.train_memory_decoder(ds, hidden=args.hidden, epochs=args.epochs,
                                        rng=np.random.default_rng(args.seed or 0))
    analysis.write_csv(out / "decoder.csv",
                       ["target", "cells", "accuracy", "baseline_accuracy", "p_value"],
                       [[ds.target_name, len(res.columns), res.accuracy, res.baseline_accuracy,
                         res.p_value]])
    print(f"hidden-cell accuracy {res.accuracy:.4f} vs majority {res.baseline_accuracy:.4f} "
          f"(p = {res.p_value:.4g})")
    return 0


def cmd_probe(args) -> int:
    config = _config(args)
    out = output_root(args.out, config)
    ds = _dataset(args, config, out)
    if ds.memory.shape[1] == 0:
        raise ContractError("this policy has no recurrent memory to probe")
    Y = _hidden_targets(ds)
    res = analysis.linear_probe(ds.memory, Y, ds.episode, ridge=args.ridge,
                                rng=np.random.default_rng(args.seed or 0),
                                n_permutations=args.permutations)
    analysis.write_csv(out / "probe.csv", ["target", "r2"],
                       [[i, r] for i, r in enumerate(res.r2)])
    print(f"mean held-out R^2 {res.mean_r2:.4f}; permutation null mean "
          f"{np.mean(res.null_mean_r2):.4f} (p = {res.p_value:.4g})")
    return 0


def _common(p: argparse.ArgumentParser, seed_help: str = "random seed"):
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted config override, e.g. policy.hidden=8 (repeatable)")
    p.add_argument("--seed", type=int, help=seed_help)
    p.add_argument("--out", help="output directory")


def _analysis_args(p: argparse.ArgumentParser):
    _common(p, "rollout and split seed")
    p.add_argument("--checkpoint", help="trained policy checkpoint")
    p.add_argument("--dataset", help="reuse a saved activations.npz instead of collecting")
    p.add_argument("--episodes", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iamlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run per seed")
    _common(p, "train this single seed instead of the config's list")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="mean episodic return of a checkpoint")
    _common(p, "evaluation seed")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--mode", choices=["greedy", "sample"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run the [sweep] grid, skipping completed cells")
    _common(p, "run the grid for this single seed")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="learning curves as SVG")
    p.add_argument("files", nargs="*", help="metrics.jsonl files or run directories (one series)")
    p.add_argument("--label", default="run")
    p.add_argument("--series", action="append", metavar="LABEL=F1,F2,...")
    p.add_argument("--reference", action="append", metavar="LABEL=VALUE",
                   help="dashed horizontal reference line")
    p.add_argument("--metric", default="mean_return")
    p.add_argument("--title", default="")
    p.add_argument("--out", help="output .svg path or directory")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("analyze-cca", help="CCA between memory and hidden features")
    _analysis_args(p)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.set_defaults(func=cmd_cca)

    p = sub.add_parser("decode-memory", help="reconstruct the hidden state from [x, d]")
    _analysis_args(p)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=200)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("probe", help="ridge probe of memory against hidden features")
    _analysis_args(p)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.add_argument("--permutations", type=int, default=199)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except IamLabError as exc:
        print(f"iamlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
