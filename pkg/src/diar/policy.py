"""Policy execution: best-skill selection by Q, value-aware replanning,
and a behavior-cloning baseline.

Each decision draws candidate skill latents from the diffusion model at
the current state and keeps the argmax of the clipped twin Q.  With
replanning enabled, a candidate is accepted only if the value of its
predicted end-of-horizon state does not fall below the current state's
value (minus a margin); rejected candidates trigger a bounded number of
re-draws, falling back to the best Q seen.  While executing a kept skill
the same comparison runs against each intermediate state, aborting the
skill early when the present already looks better than the predicted
future.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng
from .diffusion import LatentDiffusion
from .maze import (
    EnvState,
    MazeSpec,
    OfflineDataset,
    normalize_obs,
    sample_start,
    step,
)
from .nn import Adam, MLP, Module
from .autodiff import Tape, mse, Tensor
from .qlearn import QLearnConfig, TwinQ, VNet
from .skill_vae import SkillVae

__all__ = [
    "ExecConfig",
    "PolicyBundle",
    "EpisodeRecord",
    "select_latent",
    "ar_check",
    "execute_episode",
    "BcConfig",
    "BcPolicy",
    "bc_policy",
    "run_bc_episode",
    "record_to_json",
    "record_from_json",
]


@dataclass
class ExecConfig:
    n_candidates: int = 50  # 500 at full scale
    ar_enabled: bool = True
    ar_margin: float = 0.0
    max_resamples: int = 5
    intra_horizon_check: bool = True
    guidance_w: float = 0.0

    def __post_init__(self):
        if self.max_resamples < 1:
            raise ValueError("max_resamples must be >= 1")


@dataclass
class PolicyBundle:
    """Everything frozen that execution needs; all stages must share a maze."""

    vae: SkillVae
    diffusion: LatentDiffusion
    twin_q: TwinQ
    v_net: VNet
    exec_cfg: ExecConfig
    horizon: int
    spec_hash: str

    def value(self, obs_n: np.ndarray) -> float:
        return float(self.v_net.value(obs_n)[0])


@dataclass
class EpisodeRecord:
    seed: tuple[int, ...]
    states: np.ndarray  # (steps+1, 4) raw observations
    actions: np.ndarray  # (steps, 2)
    success: bool
    steps: int
    resamples: int

    def positions(self) -> np.ndarray:
        return self.states[:, :2]


def select_latent(
    obs_n: np.ndarray,
    bundle: PolicyBundle,
    rng: np.random.Generator,
    return_candidates: bool = False,
):
    """Draw candidates at the current (normalized) observation and return
    the clipped-Q argmax; ties break to the lowest candidate index."""
    cfg = bundle.exec_cfg
    cands = bundle.diffusion.sample(obs_n, cfg.n_candidates, rng, cfg.guidance_w)
    tiled = np.tile(obs_n[None, :], (len(cands), 1))
    q = bundle.twin_q.min_q(tiled, cands)
    best = int(np.argmax(q))
    if return_candidates:
        return cands[best], float(q[best]), cands, q
    return cands[best], float(q[best])


def ar_check(
    obs_n: np.ndarray,
    latent: np.ndarray,
    bundle: PolicyBundle,
    margin: float | None = None,
) -> tuple[bool, np.ndarray]:
    """Keep the skill iff V(predicted end state) >= V(now) - margin.

    Returns (keep, predicted end observation, normalized).
    """
    margin = bundle.exec_cfg.ar_margin if margin is None else margin
    pred_end = bundle.vae.decode_state(obs_n[None, :], latent[None, :]).data[0]
    keep = bundle.value(pred_end) >= bundle.value(obs_n) - margin
    return keep, pred_end


def _decide(obs_n, bundle, rng):
    """One decision: selection plus bounded replanning retries.

    Returns (latent, predicted end obs, resamples used).  Retry candidate
    sets are drawn in a single batched sampler call (cheaper than one call
    per retry; each retry still consumes its own fresh block of latents).
    """
    cfg = bundle.exec_cfg
    if not cfg.ar_enabled:
        z, _ = select_latent(obs_n, bundle, rng)
        _, pred = ar_check(obs_n, z, bundle, margin=np.inf)
        return z, pred, 0
    z, q = select_latent(obs_n, bundle, rng)
    keep, pred = ar_check(obs_n, z, bundle)
    if keep:
        return z, pred, 0
    best = (q, z, pred)
    n, m = cfg.n_candidates, cfg.max_resamples
    cands = bundle.diffusion.sample(obs_n, m * n, rng, cfg.guidance_w)
    q_all = bundle.twin_q.min_q(np.tile(obs_n[None, :], (m * n, 1)), cands)
    for attempt in range(m):
        block = slice(attempt * n, (attempt + 1) * n)
        idx = int(np.argmax(q_all[block]))
        z_try = cands[block][idx]
        q_try = float(q_all[block][idx])
        keep, pred = ar_check(obs_n, z_try, bundle)
        if q_try > best[0]:
            best = (q_try, z_try, pred)
        if keep:
            return z_try, pred, attempt + 1
    _, z, pred = best
    return z, pred, m


def execute_episode(
    spec: MazeSpec,
    bundle: PolicyBundle,
    rng: np.random.Generator,
    start: EnvState | None = None,
    seed_label: tuple[int, ...] = (),
) -> EpisodeRecord:
    """Roll one episode to goal or the step limit.

    A kept skill is decoded closed-loop for up to H steps; with the
    intra-horizon check on, execution aborts early (and re-decides) as soon
    as the current value exceeds the value of the originally predicted
    end-of-horizon state by more than the margin.
    """
    if spec.hash() != bundle.spec_hash:
        raise ValueError("policy bundle was trained on a different maze")
    cfg = bundle.exec_cfg
    state = sample_start(spec, rng) if start is None else start
    states = [state.obs()]
    actions: list[np.ndarray] = []
    t = 0
    resamples = 0
    success = float(np.hypot(*(state.pos - _goal(spec)))) <= spec.goal_radius
    while t < spec.max_episode_steps and not success:
        obs_n = normalize_obs(spec, state.obs())
        z, pred_end, used = _decide(obs_n, bundle, rng)
        resamples += used
        v_pred_end = bundle.value(pred_end)
        for _ in range(bundle.horizon):
            action = bundle.vae.decode_action(obs_n[None, :], z[None, :]).data[0]
            action = np.clip(action, -1.0, 1.0)
            state, reward, done = step(spec, state, action)
            states.append(state.obs())
            actions.append(action)
            t += 1
            if done:
                success = True
                break
            if t >= spec.max_episode_steps:
                break
            obs_n = normalize_obs(spec, state.obs())
            if (
                cfg.ar_enabled
                and cfg.intra_horizon_check
                and v_pred_end < bundle.value(obs_n) - cfg.ar_margin
            ):
                resamples += 1
                break
    return EpisodeRecord(
        seed=tuple(seed_label),
        states=np.array(states),
        actions=np.array(actions) if actions else np.zeros((0, 2)),
        success=bool(success),
        steps=t,
        resamples=resamples,
    )


def _goal(spec: MazeSpec) -> np.ndarray:
    from .maze import goal_center

    return goal_center(spec)


# ---------------------------------------------------------------------------
# behavior cloning baseline
# ---------------------------------------------------------------------------


@dataclass
class BcConfig:
    lr: float = 1e-3
    batch: int = 256
    epochs: int = 30
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0


class BcPolicy(Module):
    def __init__(self, cfg: BcConfig, obs_dim: int = 4, act_dim: int = 2):
        self.net = MLP(make_rng(cfg.seed, 401), obs_dim, cfg.hidden, act_dim)
        self.cfg = cfg

    def act(self, obs_n: np.ndarray) -> np.ndarray:
        return np.clip(self.net(Tensor(np.atleast_2d(obs_n))).data[0], -1.0, 1.0)


def bc_policy(ds: OfflineDataset, cfg: BcConfig | None = None) -> BcPolicy:
    """Mean-squared regression of dataset actions on normalized states."""
    cfg = cfg or BcConfig()
    if not ds.trajectories:
        raise ValueError("empty dataset")
    obs = np.concatenate([t.states[:-1] for t in ds.trajectories])
    acts = np.concatenate([t.actions for t in ds.trajectories])
    obs_n = normalize_obs(ds.spec, obs)
    policy = BcPolicy(cfg)
    params = policy.params()
    opt = Adam(params, lr=cfg.lr)
    n = len(obs_n)
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, 41, epoch).permutation(n)
        for lo in range(0, n, cfg.batch):
            idx = order[lo : lo + cfg.batch]
            with Tape() as tape:
                loss = mse(policy.net(Tensor(obs_n[idx])), Tensor(acts[idx]))
            opt.step(tape.grad(loss, params))
    return policy


def run_bc_episode(
    spec: MazeSpec,
    policy: BcPolicy,
    rng: np.random.Generator,
    start: EnvState | None = None,
    seed_label: tuple[int, ...] = (),
) -> EpisodeRecord:
    state = sample_start(spec, rng) if start is None else start
    states = [state.obs()]
    actions = []
    success = False
    t = 0
    while t < spec.max_episode_steps and not success:
        action = policy.act(normalize_obs(spec, state.obs()))
        state, reward, done = step(spec, state, action)
        states.append(state.obs())
        actions.append(action)
        t += 1
        success = bool(done)
    return EpisodeRecord(
        seed=tuple(seed_label),
        states=np.array(states),
        actions=np.array(actions) if actions else np.zeros((0, 2)),
        success=success,
        steps=t,
        resamples=0,
    )


# ---------------------------------------------------------------------------
# JSON-lines serialization
# ---------------------------------------------------------------------------


def record_to_json(rec: EpisodeRecord) -> str:
    return json.dumps(
        {
            "seed": list(rec.seed),
            "success": rec.success,
            "steps": rec.steps,
            "resamples": rec.resamples,
            "trajectory": [[round(float(x), 6) for x in p] for p in rec.positions()],
        },
        separators=(",", ":"),
    )


def record_from_json(line: str) -> dict:
    return json.loads(line)
