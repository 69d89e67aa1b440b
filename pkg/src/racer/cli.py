"""``racer`` command line: train, eval, sweep-alpha, gap-experiment, inspect-cvar."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import riskmeasures as rm
from .critic import evaluate
from .envs import CliffCar, CliffCarConfig
from .trainer import ABLATIONS, PRESETS, TrainerConfig, TrainingAborted, evaluate_policy, load_learner, train

log = logging.getLogger("racer")

EXIT_OK, EXIT_ERROR, EXIT_BAD_INPUT, EXIT_ABORTED = 0, 1, 2, 3


class BadInput(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("RACER_LOG_LEVEL", "info").lower()
    if level not in ("error", "info", "debug"):
        level = "info"
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def load_run_config(path) -> tuple[TrainerConfig, CliffCarConfig]:
    """Read a JSON run config: optional ``preset`` name plus ``trainer`` and ``env`` sections."""
    if path is None:
        return TrainerConfig(), CliffCarConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise BadInput(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadInput(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise BadInput("config must be a JSON object")
    unknown = set(raw) - {"preset", "trainer", "env"}
    if unknown:
        raise BadInput(f"unknown top-level config keys: {sorted(unknown)}")
    trainer = dict(raw.get("trainer", {}))
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise BadInput(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        trainer = {**PRESETS[preset], **trainer}
    try:
        return TrainerConfig.from_dict(trainer), CliffCarConfig.from_dict(raw.get("env", {}))
    except (TypeError, ValueError) as exc:
        raise BadInput(f"invalid config: {exc}") from exc


def _apply_overrides(cfg: TrainerConfig, args) -> TrainerConfig:
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        kw["total_steps"] = args.steps
    if getattr(args, "alpha", None) is not None:
        kw["alpha"] = args.alpha
    for name in getattr(args, "ablation", None) or ():
        kw[name] = True
    try:
        return replace(cfg, **kw)
    except ValueError as exc:
        raise BadInput(str(exc)) from exc


def run_training(cfg: TrainerConfig, env_cfg: CliffCarConfig, out_dir: Path, eval_episodes: int = 5) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps({"trainer": cfg.to_dict(), "env": env_cfg.to_dict()}, indent=2))
    env = CliffCar(env_cfg, seed=cfg.seed)
    with open(out_dir / "metrics.jsonl", "w") as stream:
        result = train(cfg, env, stream, out_dir)
    ev = evaluate_policy(result.actor, result.limits, CliffCar(env_cfg), eval_episodes, seed=cfg.seed)
    summary = {
        "cum_failures": result.cum_failures,
        "cum_failures_fast": result.cum_failures_fast,
        "avg_speed": ev.avg_speed,
        "eval_failures": ev.failures,
        "v_plus_final": result.limits.reported_v_plus().tolist(),
        "steps": result.steps,
        "episodes": result.episodes,
    }
    (out_dir / "final_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def cmd_train(args) -> int:
    cfg, env_cfg = load_run_config(args.config)
    cfg = _apply_overrides(cfg, args)
    summary = run_training(cfg, env_cfg, Path(args.out), args.eval_episodes)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return load_learner(path)
    except (OSError, KeyError, ValueError) as exc:
        raise BadInput(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_eval(args) -> int:
    learner, meta = _load_checkpoint(args.checkpoint)
    env = CliffCar(CliffCarConfig.from_dict(meta.get("env", {})))
    ev = evaluate_policy(learner.actor, learner.limits, env, args.episodes, args.seed)
    print(json.dumps({"avg_speed": ev.avg_speed, "failures": ev.failures, "avg_return": ev.avg_return}))
    return EXIT_OK


def _sweep_one(job):
    cfg, env_cfg, out_dir = job
    try:
        summary = run_training(cfg, env_cfg, out_dir)
        return cfg.alpha, cfg.seed, summary, None
    except Exception as exc:  # reported per run; other runs continue
        return cfg.alpha, cfg.seed, None, f"{type(exc).__name__}: {exc}"


def cmd_sweep_alpha(args) -> int:
    base, env_cfg = load_run_config(args.config)
    base = _apply_overrides(base, args)
    out = Path(args.out)
    jobs = []
    for alpha in sorted(set(args.alphas)):
        for seed in sorted(set(args.seeds)):
            try:
                cfg = replace(base, alpha=alpha, seed=seed)
            except ValueError as exc:
                raise BadInput(str(exc)) from exc
            jobs.append((cfg, env_cfg, out / f"alpha{alpha:g}_seed{seed}"))
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "seed", "cum_failures", "avg_speed"])
        for alpha, seed, summary, err in sorted(results, key=lambda r: (r[0], r[1])):
            if err is not None:
                failed += 1
                log.error("run alpha=%g seed=%d failed: %s", alpha, seed, err)
                continue
            w.writerow([repr(alpha), seed, summary["cum_failures"], repr(summary["avg_speed"])])
    print(out / "sweep.csv")
    return EXIT_ABORTED if failed else EXIT_OK


def cmd_gap_experiment(args) -> int:
    if args.trials < 1:
        raise BadInput("--trials must be >= 1")
    result = rm.run_gap_experiment(args.trials, seed=args.seed, alpha=args.alpha)
    result.to_csv(args.out)
    print(f"{args.out}: {len(result)} trials, spearman={result.spearman():.4f}")
    return EXIT_OK


def _parse_vector(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(",")])
    except ValueError as exc:
        raise BadInput(f"{name} must be comma-separated numbers") from exc


def inspect_report(learner, state, action, alpha) -> tuple[str, list]:
    e = learner.critic
    if state.shape != (e.obs_dim,) or action.shape != (e.act_dim,):
        raise BadInput(f"state needs {e.obs_dim} values and action {e.act_dim}")
    members = evaluate(e, state, action)
    mix = rm.mixture(members)
    lines = [f"{'':10s} {'mean':>10s} {'VaR':>10s} {'CVaR':>10s}"]
    for i, d in enumerate(members):
        lines.append(f"{'member ' + str(i):10s} {d.mean():10.4f} {rm.var(d, alpha):10.4f} {rm.cvar(d, alpha):10.4f}")
    lines.append(f"{'mixture':10s} {mix.mean():10.4f} {rm.var(mix, alpha):10.4f} {rm.cvar(mix, alpha):10.4f}")
    lines.append(f"alpha {alpha:g}  cvar_gap {rm.cvar_gap(members, alpha):.6f}  tail_emd_mean {rm.tail_emd_mean(members, alpha):.6f}")
    rows = [(z, *[d.probs[j] for d in members], mix.probs[j]) for j, z in enumerate(mix.atoms)]
    return "\n".join(lines), rows


def cmd_inspect_cvar(args) -> int:
    learner, _ = _load_checkpoint(args.checkpoint)
    state = _parse_vector(args.state, "--state")
    action = _parse_vector(args.action, "--action")
    report, rows = inspect_report(learner, state, action, args.alpha)
    print(report)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["atom", *[f"member_{i}" for i in range(len(rows[0]) - 2)], "mixture"])
            w.writerows([[repr(float(x)) for x in r] for r in rows])
    return EXIT_OK


def _alpha(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in [0, 1)")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="racer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--ablation", action="append", choices=ABLATIONS)

    sp = sub.add_parser("train", help="train one agent")
    run_flags(sp)
    sp.add_argument("--alpha", type=_alpha)
    sp.add_argument("--eval-episodes", type=int, default=5)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep-alpha", help="train one run per (alpha, seed)")
    run_flags(sp)
    sp.add_argument("--alphas", type=_alpha, nargs="+", required=True)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0])
    sp.add_argument("--parallel", type=int, default=1)
    sp.set_defaults(func=cmd_sweep_alpha)

    sp = sub.add_parser("gap-experiment", help="tail-EMD vs CVaR-gap study on random mixtures")
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--alpha", type=_alpha, default=0.9)
    sp.add_argument("--out", required=True, help="CSV path")
    sp.set_defaults(func=cmd_gap_experiment)

    sp = sub.add_parser("inspect-cvar", help="print a critic's distributions at one (state, action)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--state", required=True, help="comma-separated observation")
    sp.add_argument("--action", required=True, help="comma-separated action")
    sp.add_argument("--alpha", type=_alpha, default=0.9)
    sp.add_argument("--csv", help="also write atom/probability pairs here")
    sp.set_defaults(func=cmd_inspect_cvar)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BadInput as exc:
        print(f"racer: error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except TrainingAborted as exc:
        print(f"racer: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
