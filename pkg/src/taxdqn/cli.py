"""Command-line entry point: ``taxdqn {dp,train,eval,sweep,calibrate,analyze}``.

Exit codes: 0 success, 2 configuration or artifact mismatch, 3 training
failure, 4 a failed check (calibration did not converge, analysis invariant
violated).
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, dp, nn
from .config import (
    ArtifactMismatch,
    CachedTrainer,
    ConfigError,
    ExperimentConfig,
    check_checkpoint,
    write_csv,
    write_text,
)
from .dqn import EvalResult, evaluate_policy, train
from .env import HISTORY_LEN, N_STATUS

log = logging.getLogger("taxdqn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_CHECK = 4


class CheckFailed(RuntimeError):
    pass


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    return out


def _trainer(cfg: ExperimentConfig, out: Path) -> CachedTrainer:
    return CachedTrainer(out / "jobs")


def _load_checkpoint(cfg: ExperimentConfig, path: Optional[str], out: Path) -> nn.Network:
    path = Path(path) if path else out / "checkpoint.npz"
    if not path.exists():
        raise ArtifactMismatch(f"checkpoint not found: {path}")
    try:
        net, _, header = nn.load(path, cfg.network_spec().input_dim)
    except nn.CheckpointError as exc:
        raise ArtifactMismatch(str(exc)) from exc
    check_checkpoint(header, cfg.hash, path)
    return net


def _samples_rows(ev: EvalResult):
    s = ev.samples
    n_ep = len(s) // ev.episode_utilities.shape[0] if len(s) else 0
    for i in range(len(s)):
        yield ([i // n_ep, i % n_ep, int(s.status[i]), int(s.closure_offered[i])]
               + [float(x) for x in s.history[i]]
               + [int(s.phase[i]), float(s.u1[i]), int(s.u2[i])])


SAMPLE_HEADER = (["episode", "step", "status", "closure_offered"]
                 + [f"h{i}" for i in range(1, HISTORY_LEN + 1)] + ["phase", "u1", "u2"])


def _evaluate(cfg: ExperimentConfig, net: nn.Network) -> EvalResult:
    return evaluate_policy(net, cfg.tax, cfg.eval.episodes, cfg.eval.steps,
                           seed=analysis.eval_seed(cfg.train))


# --- subcommands ---------------------------------------------------------------

def cmd_dp(cfg: ExperimentConfig, args) -> int:
    if cfg.tax.risk_aversion != 0:
        raise ConfigError("dp requires risk_aversion = 0")
    out = _out(cfg)
    table = dp.solve(cfg.tax, tolerance=args.tolerance)
    sp = table.space
    rows = []
    for idx in range(sp.size):
        s, c, digits, p = sp.decode(idx)
        key = np.unravel_index(idx, sp.shape)
        rows.append([s, int(c)] + [float(sp.grid[d]) for d in digits]
                    + [p, float(table.values[key]), float(sp.grid[table.policy_u1[key]]),
                       int(table.policy_u2[key] and c)])
    write_csv(out / "dp_values.csv", ["status", "closure_offered"]
              + [f"h{i}" for i in range(1, HISTORY_LEN + 1)] + ["phase", "value", "u1", "u2"],
              rows, cfg.hash)
    v0 = table.start_value(cfg.tax)
    write_csv(out / "dp_summary.csv", ["scenario", "discount", "start_value", "iterations", "residual"],
              [[cfg.scenario, cfg.tax.discount, v0, table.iterations, table.residual]], cfg.hash)
    print(f"{cfg.scenario}: start value {v0:.6f} ({table.iterations} sweeps)")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    res = train(cfg.tax, cfg.train, cfg.network_spec())
    nn.save(out / "checkpoint.npz", res.net, res.learner.adam, cfg_hash=cfg.hash)
    write_csv(out / "train_log.csv",
              ["episode", "epsilon", "mean_loss", "eval_discounted_utility", "eval_mean_u1"],
              [[r.episode, r.epsilon, r.mean_loss, r.eval_discounted_utility, r.eval_mean_u1]
               for r in res.log], cfg.hash)
    print(f"trained {cfg.train.episodes} episodes in {res.seconds:.1f}s")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    net = _load_checkpoint(cfg, args.checkpoint, out)
    ev = _evaluate(cfg, net)
    write_csv(out / "eval_summary.csv",
              ["discounted_utility", "discounted_revenue", "mean_reward", "mean_u1", "std_u1", "samples"],
              [[ev.discounted_utility, ev.discounted_revenue, ev.mean_reward, ev.mean_u1, ev.std_u1,
                len(ev.samples)]], cfg.hash)
    write_csv(out / "decision_samples.csv", SAMPLE_HEADER, _samples_rows(ev), cfg.hash)
    print(f"utility {ev.discounted_utility:.6g}  mean u1 {ev.mean_u1:.4f}  "
          f"std u1 {ev.std_u1:.4f}  samples {len(ev.samples)}")
    return EXIT_OK


def _prefill(trainer: CachedTrainer, cfg: ExperimentConfig, lams: Sequence[float], jobs: int) -> None:
    """Train the per-lambda jobs in worker processes; results land in the cache."""
    if jobs <= 1:
        return
    todo = [cfg.tax.with_(risk_aversion=float(l)) for l in lams]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futs = [pool.submit(trainer, p, cfg.train, cfg.network_spec(p)) for p in todo]
        for f in futs:
            try:
                f.result()
            except Exception as exc:  # reported again by the sequential pass
                log.warning("worker failed: %s", exc)


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    trainer = _trainer(cfg, out)
    lams = cfg.sweep.lambdas
    _prefill(trainer, cfg, lams, args.jobs)
    rows = analysis.sweep_lambda(lams, cfg.tax, cfg.train, cfg.network_spec(), trainer)
    write_csv(out / "sweep.csv", ["lambda", "mean_u1", "std_u1", "discounted_utility", "error"],
              [[r.lam, r.mean_u1, r.std_u1, r.discounted_utility, r.error] for r in rows], cfg.hash)
    rho = analysis.spearman_trend(rows)
    write_csv(out / "sweep_trend.csv", ["scenario", "spearman"], [[cfg.scenario, rho]], cfg.hash)
    for r in rows:
        print(f"lambda {r.lam:g}: mean u1 {r.mean_u1:.4f} std {r.std_u1:.4f} {r.error}")
    print(f"spearman {rho:.4f}")
    return EXIT_OK if all(r.ok for r in rows) else EXIT_TRAINING


def cmd_calibrate(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    c = cfg.calibrate
    trainer = _trainer(cfg, out)
    probes = []
    try:
        cal = analysis.calibrate_lambda(c.target, cfg.tax, cfg.train, cfg.network_spec(), c.lo, c.hi,
                                        c.tolerance, c.max_probes, trainer)
        probes, ok = cal.probes, cal.converged
        result = [[cal.lam, cal.mean_u1, int(cal.converged)]]
    except analysis.BracketError as exc:
        probes, ok, result = [exc.lo, exc.hi], False, [[float("nan"), float("nan"), 0]]
        print(exc, file=sys.stderr)
    write_csv(out / "calibration_trace.csv", ["probe", "lambda", "mean_u1", "std_u1"],
              [[i, r.lam, r.mean_u1, r.std_u1] for i, r in enumerate(probes)], cfg.hash)
    write_csv(out / "calibration.csv", ["lambda", "mean_u1", "converged"], result, cfg.hash)
    print(f"lambda {result[0][0]:.4f}  mean u1 {result[0][1]:.4f}  converged {bool(result[0][2])}")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_analyze(cfg: ExperimentConfig, args) -> int:
    out = _out(cfg)
    net = _load_checkpoint(cfg, args.checkpoint, out)
    ev = _evaluate(cfg, net)
    s = ev.samples
    h = cfg.hash
    hist = analysis.histogram_u1(s)
    write_csv(out / "hist_u1.csv", ["u1", "count"], [[k / 100, int(c)] for k, c in enumerate(hist)], h)
    hs = analysis.histogram_by_status(s)
    write_csv(out / "hist_status.csv", ["u1"] + [f"status_{k}" for k in range(1, N_STATUS + 1)],
              [[k / 100] + [int(x) for x in row] for k, row in enumerate(hs)], h)
    hh, edges = analysis.histogram_by_hidden_sum(s, args.bins)
    write_csv(out / "hist_hidden_sum.csv",
              ["u1"] + [f"sum_{a:g}_{b:g}" for a, b in zip(edges[:-1], edges[1:])],
              [[k / 100] + [int(x) for x in row] for k, row in enumerate(hh)], h)
    cmp = analysis.compare_constant_policy(net, cfg.tax, cfg.eval.episodes, cfg.eval.steps,
                                           seed=analysis.eval_seed(cfg.train))
    write_csv(out / "constant_policy.csv", ["u1", "discounted_utility"],
              [[k / 100, float(u)] for k, u in enumerate(cmp.utilities)], h)
    write_csv(out / "constant_comparison.csv",
              ["best_constant_u1", "best_constant_utility", "trained_utility", "trained_mean_u1"],
              [[cmp.best_u1, cmp.best_utility, cmp.trained_utility, cmp.trained_mean_u1]], h)
    tree = analysis.fit_decision_tree(s, periodic=cfg.tax.scenario.periodic)
    write_text(out / "tree.txt", tree.to_text(), h)
    write_text(out / "tree.dot", tree.to_dot(), h, comment="//")

    failures = []
    n = len(s)
    if not (hist.sum() == hs.sum() == hh.sum() == n):
        failures.append("histogram counts do not sum to the sample count")
    if tree.depth() > 3 or sum(l.count for l in tree.leaves()) != n:
        failures.append("decision tree invalid")
    X = analysis.sample_features(s, cfg.tax.scenario.periodic)
    if np.mean((tree.predict(X) - s.u1) ** 2) > np.var(s.u1) + 1e-12:
        failures.append("decision tree worse than the global mean")
    print(tree.to_text(), end="")
    print(f"trained {cmp.trained_utility:.6g} vs best constant u1={cmp.best_u1:.2f} {cmp.best_utility:.6g}")
    for f in failures:
        print(f"check failed: {f}", file=sys.stderr)
    return EXIT_CHECK if failures else EXIT_OK


COMMANDS = {
    "dp": cmd_dp,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "calibrate": cmd_calibrate,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taxdqn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML or JSON config file (defaults built in)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--scenario", help="override the closure scenario, e.g. bernoulli:0.2")
        sp.add_argument("--risk-aversion", type=float, dest="risk_aversion", help="override lambda")
        if name == "dp":
            sp.add_argument("--tolerance", type=float, default=1e-9)
        if name in ("eval", "analyze"):
            sp.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.npz)")
        if name == "analyze":
            sp.add_argument("--bins", type=int, default=25)
        if name == "sweep":
            sp.add_argument("--jobs", type=int, default=1, help="worker processes for training")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = cfg.with_out(args.out)
    try:
        if args.scenario:
            from .env import ClosureScenario
            cfg = replace(cfg, tax=cfg.tax.with_(scenario=ClosureScenario.parse(args.scenario)))
        if args.risk_aversion is not None:
            cfg = replace(cfg, tax=cfg.tax.with_(risk_aversion=args.risk_aversion))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, dp.ConvergenceError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
