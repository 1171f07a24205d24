"""Evaluation protocol and report: N episodes x G seed groups, mean and
standard deviation of the per-group success rate, JSON-lines episode log.

Episodes draw from per-(group, episode) RNG streams, so results are
identical whether they run serially or fanned across worker processes;
``DIAR_THREADS`` caps the worker count.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .maze import MazeSpec
from .policy import (
    BcPolicy,
    EpisodeRecord,
    PolicyBundle,
    execute_episode,
    record_to_json,
    run_bc_episode,
)

__all__ = ["EvalReport", "evaluate", "write_episodes", "read_report", "write_metrics_csv"]


@dataclass
class EvalReport:
    n_episodes: int
    seed_groups: int
    success_rate: float
    success_std: float
    mean_steps: float
    mean_resamples: float
    group_rates: list[float]
    episodes_path: str = ""

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def _run_group(args) -> list[EpisodeRecord]:
    spec, policy, group_seed, group_idx, n_episodes = args
    records = []
    for i in range(n_episodes):
        rng = make_rng(group_seed, group_idx, i)
        label = (group_seed, group_idx, i)
        if isinstance(policy, PolicyBundle):
            records.append(execute_episode(spec, policy, rng, seed_label=label))
        elif isinstance(policy, BcPolicy):
            records.append(run_bc_episode(spec, policy, rng, seed_label=label))
        else:
            raise TypeError(f"unsupported policy type {type(policy)!r}")
    return records


def _worker_count(requested: int) -> int:
    cap = os.environ.get("DIAR_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    if requested <= 0:
        return 1
    return max(1, min(requested, cap))


def evaluate(
    spec: MazeSpec,
    policy,
    n_episodes: int,
    seed_groups: int,
    seed: int,
    workers: int = 0,
) -> tuple[EvalReport, list[EpisodeRecord]]:
    """Success rate +/- std over seed groups (std needs >= 2 groups)."""
    if seed_groups < 2:
        raise ValueError("need >= 2 seed groups for a standard deviation")
    tasks = [(spec, policy, seed, g, n_episodes) for g in range(seed_groups)]
    n_workers = _worker_count(workers)
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            per_group = list(pool.map(_run_group, tasks))
    else:
        per_group = [_run_group(t) for t in tasks]
    records = [rec for group in per_group for rec in group]
    rates = [float(np.mean([r.success for r in group])) for group in per_group]
    report = EvalReport(
        n_episodes=n_episodes,
        seed_groups=seed_groups,
        success_rate=float(np.mean(rates)),
        success_std=float(np.std(rates)),
        mean_steps=float(np.mean([r.steps for r in records])),
        mean_resamples=float(np.mean([r.resamples for r in records])),
        group_rates=rates,
    )
    return report, records


def write_episodes(records: list[EpisodeRecord], path) -> None:
    Path(path).write_text("".join(record_to_json(r) + "\n" for r in records))


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def write_metrics_csv(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
