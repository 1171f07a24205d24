"""Stage orchestration: run each training stage from a RunConfig, persist
artifacts under an output directory, and reassemble the frozen execution
bundle with maze-hash verification.

Artifacts: dataset.bin (+ .meta.json sidecar), vae.ckpt, diffusion.ckpt,
qlearn.ckpt, per-stage metrics CSVs, config_echo.cfg, episodes.jsonl,
eval_report.json.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, echo_config
from .diffusion import Denoiser, DiffusionConfig, LatentDiffusion, NoiseSchedule, train_diffusion
from .evaluate import EvalReport, evaluate, write_episodes, write_metrics_csv
from .maze import MAZE_VARIANTS, MazeSpec, OfflineDataset, generate_dataset, load_dataset, save_dataset
from .policy import BcConfig, BcPolicy, ExecConfig, PolicyBundle, bc_policy
from .qlearn import QLearnConfig, TwinQ, VNet, train_q
from .skill_vae import SkillVae, VaeConfig

__all__ = [
    "MissingStageError",
    "stage_paths",
    "make_spec",
    "run_gen_data",
    "run_train_vae",
    "run_train_diffusion",
    "run_train_q",
    "load_bundle",
    "run_eval",
    "write_echo",
]


class MissingStageError(FileNotFoundError):
    """An upstream artifact is absent; carries the subcommand to run."""

    def __init__(self, artifact: str, subcommand: str):
        super().__init__(
            f"missing {artifact}: run the '{subcommand}' subcommand first"
        )
        self.subcommand = subcommand


def stage_paths(out: Path) -> dict[str, Path]:
    return {
        "dataset": out / "dataset.bin",
        "vae": out / "vae.ckpt",
        "diffusion": out / "diffusion.ckpt",
        "qlearn": out / "qlearn.ckpt",
        "echo": out / "config_echo.cfg",
        "episodes": out / "episodes.jsonl",
        "report": out / "eval_report.json",
    }


def make_spec(cfg: RunConfig) -> MazeSpec:
    try:
        return MAZE_VARIANTS[cfg.data.variant]()
    except KeyError:
        raise ValueError(
            f"unknown maze variant {cfg.data.variant!r}; have {sorted(MAZE_VARIANTS)}"
        ) from None


def write_echo(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    stage_paths(out)["echo"].write_text(echo_config(cfg))


def _require(path: Path, subcommand: str) -> Path:
    if not path.exists():
        raise MissingStageError(path.name, subcommand)
    return path


def _cfg_from_meta(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            value = data[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    return cls(**kwargs)


def _cfg_to_meta(cfg) -> dict:
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def run_gen_data(cfg: RunConfig, out: Path) -> OfflineDataset:
    out.mkdir(parents=True, exist_ok=True)
    spec = make_spec(cfg)
    ds = generate_dataset(
        spec,
        cfg.data.n_episodes,
        cfg.data.noise_level,
        cfg.data.seed,
        detour_prob=cfg.data.detour_prob,
        wander_prob=cfg.data.wander_prob,
    )
    ds.metadata["variant"] = cfg.data.variant
    ds.metadata["horizon"] = cfg.vae.horizon
    save_dataset(ds, stage_paths(out)["dataset"])
    write_echo(cfg, out)
    return ds


def _load_dataset(out: Path) -> OfflineDataset:
    return load_dataset(_require(stage_paths(out)["dataset"], "gen-data"))


def run_train_vae(cfg: RunConfig, out: Path) -> SkillVae:
    from .skill_vae import train_vae

    ds = _load_dataset(out)
    vae, history = train_vae(ds, cfg.vae)
    write_metrics_csv(history, out / "vae_metrics.csv")
    save_checkpoint(
        stage_paths(out)["vae"],
        ds.spec.hash(),
        {"skill_vae": {k: v.data for k, v in vae.params().items()}},
        {"vae_cfg": _cfg_to_meta(cfg.vae)},
    )
    return vae


def _load_vae(out: Path) -> tuple[str, SkillVae]:
    spec_hash, stages, meta = load_checkpoint(_require(stage_paths(out)["vae"], "train-vae"))
    vae = SkillVae(_cfg_from_meta(VaeConfig, meta["vae_cfg"]))
    vae.load_params(stages["skill_vae"])
    return spec_hash, vae


def run_train_diffusion(cfg: RunConfig, out: Path) -> LatentDiffusion:
    ds = _load_dataset(out)
    vae_hash, vae = _load_vae(out)
    if vae_hash != ds.spec.hash():
        raise ValueError("vae checkpoint was trained on a different maze")
    model, history = train_diffusion(ds, vae, cfg.diffusion)
    write_metrics_csv(history, out / "diffusion_metrics.csv")
    save_checkpoint(
        stage_paths(out)["diffusion"],
        ds.spec.hash(),
        {
            "denoiser": {k: v.data for k, v in model.denoiser.params().items()},
            "standardizer": {"z_mean": model.z_mean, "z_std": model.z_std},
        },
        {"diffusion_cfg": _cfg_to_meta(cfg.diffusion)},
    )
    return model


def _load_diffusion(out: Path) -> tuple[str, LatentDiffusion]:
    spec_hash, stages, meta = load_checkpoint(
        _require(stage_paths(out)["diffusion"], "train-diff")
    )
    dcfg = _cfg_from_meta(DiffusionConfig, meta["diffusion_cfg"])
    den = Denoiser(dcfg)
    den.load_params(stages["denoiser"])
    model = LatentDiffusion(
        denoiser=den,
        sched=NoiseSchedule.linear(dcfg.steps),
        z_mean=stages["standardizer"]["z_mean"],
        z_std=stages["standardizer"]["z_std"],
        cfg=dcfg,
    )
    return spec_hash, model


def run_train_q(cfg: RunConfig, out: Path, step_hook=None):
    ds = _load_dataset(out)
    vae_hash, vae = _load_vae(out)
    diff_hash, model = _load_diffusion(out)
    if len({vae_hash, diff_hash, ds.spec.hash()}) != 1:
        raise ValueError("stage checkpoints disagree on the maze spec hash")
    result = train_q(ds, vae, model, cfg.qlearn, horizon=cfg.vae.horizon, step_hook=step_hook)
    write_metrics_csv(result.history, out / "qlearn_metrics.csv")
    save_checkpoint(
        stage_paths(out)["qlearn"],
        ds.spec.hash(),
        {
            "twin_q": {k: v.data for k, v in result.twin.params().items()},
            "twin_q_target": {k: v.data for k, v in result.twin_target.params().items()},
            "v_net": {k: v.data for k, v in result.v_net.params().items()},
        },
        {"qlearn_cfg": _cfg_to_meta(cfg.qlearn)},
    )
    return result


def load_bundle(cfg: RunConfig, out: Path) -> tuple[MazeSpec, PolicyBundle]:
    """Reassemble every stage; all maze hashes must agree."""
    ds = _load_dataset(out)
    vae_hash, vae = _load_vae(out)
    diff_hash, model = _load_diffusion(out)
    q_path = _require(stage_paths(out)["qlearn"], "train-q")
    q_hash, q_stages, q_meta = load_checkpoint(q_path)
    spec = ds.spec
    if len({spec.hash(), vae_hash, diff_hash, q_hash}) != 1:
        raise ValueError("stage checkpoints disagree on the maze spec hash")
    qcfg = _cfg_from_meta(QLearnConfig, q_meta["qlearn_cfg"])
    from .autodiff import make_rng

    twin = TwinQ(qcfg, make_rng(qcfg.seed, 301))
    v_net = VNet(qcfg, make_rng(qcfg.seed, 301))
    twin.load_params(q_stages["twin_q"])
    v_net.load_params(q_stages["v_net"])
    bundle = PolicyBundle(
        vae=vae,
        diffusion=model,
        twin_q=twin,
        v_net=v_net,
        exec_cfg=cfg.exec,
        horizon=vae.cfg.horizon,
        spec_hash=spec.hash(),
    )
    return spec, bundle


def run_eval(
    cfg: RunConfig,
    out: Path,
    policy_kind: str = "diar",
    episodes_name: str = "episodes.jsonl",
    report_name: str = "eval_report.json",
) -> EvalReport:
    if policy_kind == "diar":
        spec, policy = load_bundle(cfg, out)
    elif policy_kind == "bc":
        ds = _load_dataset(out)
        spec = ds.spec
        policy = bc_policy(ds, cfg.bc)
    else:
        raise ValueError(f"unknown policy kind {policy_kind!r}")
    report, records = evaluate(
        spec,
        policy,
        n_episodes=cfg.eval.episodes,
        seed_groups=cfg.eval.seed_groups,
        seed=cfg.eval.seed,
        workers=cfg.eval.workers,
    )
    episodes_path = out / episodes_name
    write_episodes(records, episodes_path)
    report.episodes_path = str(episodes_path)
    (out / report_name).write_text(report.to_json() + "\n")
    return report
