"""Command-line interface for the full pipeline.

Subcommands run in dependency order (enforced through checkpoint
presence): gen-data -> train-vae -> train-diff -> train-q -> eval.
``ablate-ar`` evaluates both replanning settings on identical episode
seeds; ``render`` draws an episode from a JSON-lines log; ``oracle-check``
runs the exact tabular verification suite.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .autodiff import make_rng
from .config import load_run_config, parse_config_text
from .evaluate import write_metrics_csv
from .maze import MAZE_VARIANTS, load_dataset
from .oracle import (
    check_monotone,
    exact_relation_check,
    greedy_trajectory,
    maze_to_mdp,
    random_connected_maze,
    value_iteration,
)
from .policy import record_from_json
from .render import render_episode_svg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="config file (section.key = value)")
    p.add_argument("--profile", choices=("desk", "paper"), default=None)
    p.add_argument("--seed", type=int, default=None, help="override data.seed")
    p.add_argument("--out", type=Path, default=Path("runs/default"))
    p.add_argument("--ar", choices=("on", "off"), default=None, help="override exec.ar_enabled")
    p.add_argument("--guidance", type=float, default=None, help="override exec.guidance_w")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="extra config override (repeatable)",
    )


def _config_from_args(args) -> "pipeline.RunConfig":
    extra = {}
    for item in args.set:
        parsed = parse_config_text(item)
        extra.update(parsed)
    if args.seed is not None:
        extra[("data", "seed")] = str(args.seed)
    if args.ar is not None:
        extra[("exec", "ar_enabled")] = "true" if args.ar == "on" else "false"
    if args.guidance is not None:
        extra[("exec", "guidance_w")] = repr(args.guidance)
    return load_run_config(args.config, args.profile, extra)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="diar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("gen-data", "generate the offline dataset"),
        ("train-vae", "train the segment VAE"),
        ("train-diff", "train the latent diffusion model"),
        ("train-q", "train the twin Q and value networks"),
        ("eval", "evaluate a policy on the maze"),
        ("ablate-ar", "evaluate with and without replanning on identical seeds"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "eval":
            p.add_argument("--policy", choices=("diar", "bc"), default="diar")

    p_render = sub.add_parser("render", help="render an episode log entry to SVG")
    _add_common(p_render)
    p_render.add_argument("--episodes", type=Path, default=None, help="episodes.jsonl path")
    p_render.add_argument("--index", type=int, default=0)
    p_render.add_argument("--svg", type=Path, default=None, help="output SVG path")

    p_oracle = sub.add_parser("oracle-check", help="exact tabular verification suite")
    _add_common(p_oracle)
    p_oracle.add_argument("--instances", type=int, default=100)

    args = parser.parse_args(argv)
    cfg = _config_from_args(args)
    out: Path = args.out
    try:
        return _dispatch(args, cfg, out)
    except (pipeline.MissingStageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, cfg, out: Path) -> int:
    cmd = args.command
    if cmd == "gen-data":
        ds = pipeline.run_gen_data(cfg, out)
        print(
            f"wrote {pipeline.stage_paths(out)['dataset']} "
            f"({len(ds)} episodes, success fraction {ds.success_fraction():.3f})"
        )
        return 0
    if cmd == "train-vae":
        pipeline.write_echo(cfg, out)
        pipeline.run_train_vae(cfg, out)
        print(f"wrote {pipeline.stage_paths(out)['vae']}")
        return 0
    if cmd == "train-diff":
        pipeline.write_echo(cfg, out)
        pipeline.run_train_diffusion(cfg, out)
        print(f"wrote {pipeline.stage_paths(out)['diffusion']}")
        return 0
    if cmd == "train-q":
        pipeline.write_echo(cfg, out)
        pipeline.run_train_q(cfg, out)
        print(f"wrote {pipeline.stage_paths(out)['qlearn']}")
        return 0
    if cmd == "eval":
        pipeline.write_echo(cfg, out)
        report = pipeline.run_eval(cfg, out, policy_kind=args.policy)
        print(
            f"{args.policy}: success {report.success_rate:.3f} +/- {report.success_std:.3f} "
            f"over {report.seed_groups} x {report.n_episodes} episodes; "
            f"mean steps {report.mean_steps:.1f}, mean resamples {report.mean_resamples:.2f}"
        )
        return 0
    if cmd == "ablate-ar":
        pipeline.write_echo(cfg, out)
        rows = []
        reports = {}
        for label, enabled in (("ar_on", True), ("ar_off", False)):
            cfg.exec.ar_enabled = enabled
            reports[label] = pipeline.run_eval(
                cfg,
                out,
                policy_kind="diar",
                episodes_name=f"episodes_{label}.jsonl",
                report_name=f"eval_report_{label}.json",
            )
        for label, rep in reports.items():
            rows.append(
                {
                    "arm": label,
                    "success_rate": rep.success_rate,
                    "success_std": rep.success_std,
                    "mean_steps": rep.mean_steps,
                    "mean_resamples": rep.mean_resamples,
                }
            )
        write_metrics_csv(rows, out / "ablate_ar.csv")
        on, off = reports["ar_on"], reports["ar_off"]
        print(f"with replanning:    {on.success_rate:.3f} +/- {on.success_std:.3f} (resamples {on.mean_resamples:.2f})")
        print(f"without replanning: {off.success_rate:.3f} +/- {off.success_std:.3f} (resamples {off.mean_resamples:.2f})")
        return 0
    if cmd == "render":
        episodes = args.episodes or pipeline.stage_paths(out)["episodes"]
        if not episodes.exists():
            raise pipeline.MissingStageError(episodes.name, "eval")
        ds = load_dataset(pipeline.stage_paths(out)["dataset"])
        lines = [ln for ln in Path(episodes).read_text().splitlines() if ln.strip()]
        ok, skipped = [], 0
        for ln in lines:
            try:
                ok.append(record_from_json(ln))
            except json.JSONDecodeError:
                skipped += 1
        if skipped:
            print(f"warning: skipped {skipped} malformed episode records", file=sys.stderr)
        if not (0 <= args.index < len(ok)):
            raise ValueError(f"episode index {args.index} out of range (have {len(ok)})")
        svg = args.svg or (out / f"episode_{args.index}.svg")
        render_episode_svg(ds.spec, ok[args.index]["trajectory"], svg)
        print(f"wrote {svg}")
        return 0
    if cmd == "oracle-check":
        rng = make_rng(cfg.data.seed, 991)
        failures = 0
        worst_residual = 0.0
        for _ in range(args.instances):
            spec = random_connected_maze(rng, 5, 5)
            mdp, _ = maze_to_mdp(spec, gamma=0.9)
            v = value_iteration(mdp)
            violations = check_monotone(mdp, v)
            if violations:
                failures += 1
                continue
            for s in range(mdp.n_states):
                if mdp.terminal[s]:
                    continue
                traj = greedy_trajectory(mdp, v, s)
                end = len(traj) - 1
                while end > 0 and mdp.terminal[traj[end]]:
                    end -= 1
                if end >= 1:
                    worst_residual = max(
                        worst_residual, exact_relation_check(mdp, v, traj, 0, end)
                    )
        print(f"monotonicity: {args.instances - failures}/{args.instances} instances clean")
        print(f"discount identity worst residual: {worst_residual:.3e}")
        passed = failures == 0 and worst_residual < 1e-10
        print("PASS" if passed else "FAIL")
        return 0 if passed else 1
    raise ValueError(f"unknown command {cmd!r}")


if __name__ == "__main__":
    sys.exit(main())
