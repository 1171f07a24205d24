"""Stage 3: diffusion-guided implicit Q-learning over (state, skill) pairs.

Twin Q networks regress Bellman targets R + gamma * V(s_{t+H}) on replay
tuples drawn from a proportional prioritized buffer; the state-value
network V fits an expectile of the clipped (min-of-twins) target-network
Q evaluated at latents freshly sampled from the diffusion model each step,
so V generalizes beyond dataset skills.  Targets track the online twins by
Polyak averaging.  An alternative bootstrapped target in the style of
latent-constrained Q-learning (max over sampled next-state latents) is
available as a baseline mode.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, make_rng, mul, square, sub
from .diffusion import LatentDiffusion
from .maze import OfflineDataset
from .nn import Adam, Linear, LayerNorm, MLP, Module, StepDecaySchedule, soft_update
from .autodiff import gelu
from .skill_vae import SkillVae, encode_dataset

__all__ = [
    "QLearnConfig",
    "QNet",
    "TwinQ",
    "VNet",
    "expectile_loss",
    "value_loss",
    "q_loss",
    "ldcq_target",
    "discounted_return",
    "SumTree",
    "PerBuffer",
    "per_sample",
    "build_replay",
    "train_q",
]


@dataclass
class QLearnConfig:
    lr: float = 5e-4
    gamma: float = 0.995
    target_rho: float = 0.995
    expectile_tau: float = 0.9
    n_latent_samples: int = 500  # execution-time candidate count (desk: 50)
    batch: int = 128
    steps: int = 3000
    per_alpha: float = 0.7
    per_beta_start: float = 0.3
    per_beta_end: float = 1.0
    sched_step: int = 50  # epochs (one epoch = one buffer pass)
    sched_factor: float = 0.3
    gamma_pow_h: bool = False  # bootstrap with gamma**H instead of gamma
    ldcq_mode: bool = False  # max-over-sampled-latents target baseline
    ldcq_samples: int = 10
    extra_steps: int = 5  # recorded knob, consumed as the resample cap default
    state_dim: int = 4
    latent_dim: int = 16
    state_embed: int = 256
    latent_embed: int = 128
    head_hidden: tuple[int, ...] = (256,)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.expectile_tau < 1.0):
            raise ValueError("expectile_tau must be in (0, 1)")
        if not (0.0 < self.target_rho <= 1.0):
            raise ValueError("target_rho must be in (0, 1]")


class _Feature(Module):
    """Linear -> GELU -> LayerNorm feature block."""

    def __init__(self, rng, in_dim: int, out_dim: int):
        self.lin = Linear(rng, in_dim, out_dim)
        self.norm = LayerNorm(out_dim)

    def __call__(self, x):
        return self.norm(gelu(self.lin(x)))


class QNet(Module):
    """State -> 256-dim and latent -> 128-dim encoders, concat, MLP head."""

    def __init__(self, cfg: QLearnConfig, rng):
        self.s_enc = _Feature(rng, cfg.state_dim, cfg.state_embed)
        self.z_enc = _Feature(rng, cfg.latent_dim, cfg.latent_embed)
        self.head = MLP(rng, cfg.state_embed + cfg.latent_embed, cfg.head_hidden, 1)

    def __call__(self, obs, latents) -> Tensor:
        from .autodiff import concat

        feats = concat([self.s_enc(_t(obs)), self.z_enc(_t(latents))], axis=1)
        return self.head(feats)[:, 0]


class TwinQ(Module):
    def __init__(self, cfg: QLearnConfig, rng):
        self.q1 = QNet(cfg, rng)
        self.q2 = QNet(cfg, rng)

    def both(self, obs, latents) -> tuple[Tensor, Tensor]:
        return self.q1(obs, latents), self.q2(obs, latents)

    def min_q(self, obs: np.ndarray, latents: np.ndarray) -> np.ndarray:
        """Clipped (pessimistic) value, computed outside any tape."""
        a, b = self.both(obs, latents)
        return np.minimum(a.data, b.data)


class VNet(Module):
    def __init__(self, cfg: QLearnConfig, rng):
        self.s_enc = _Feature(rng, cfg.state_dim, cfg.state_embed)
        self.head = MLP(rng, cfg.state_embed, cfg.head_hidden, 1)

    def __call__(self, obs) -> Tensor:
        return self.head(self.s_enc(_t(obs)))[:, 0]

    def value(self, obs: np.ndarray) -> np.ndarray:
        return self(np.atleast_2d(obs)).data


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def expectile_loss(u, tau: float):
    """Asymmetric squared loss |tau - 1(u < 0)| * u**2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    weight = np.abs(tau - (u < 0.0).astype(np.float64))
    return weight * u * u


def value_loss(
    v_net: VNet,
    target_twin: TwinQ,
    obs: np.ndarray,
    latents: np.ndarray,
    tau: float,
) -> tuple[Tensor, dict]:
    """Expectile regression of V toward the clipped target-twin Q at the
    supplied latents.  Gradients reach V only; the Q side is a constant."""
    q1 = target_twin.q1(obs, latents).data
    q2 = target_twin.q2(obs, latents).data
    target = np.minimum(q1, q2)
    v = v_net(obs)
    u = sub(Tensor(target), v)
    weight = np.abs(tau - (u.data < 0.0).astype(np.float64))
    loss = mul(square(u), Tensor(weight)).mean()
    diag = {"q1_target": q1, "q2_target": q2, "clipped_target": target}
    return loss, diag


def discounted_return(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """sum_i gamma**i * r_i over the window axis (last)."""
    h = rewards.shape[-1]
    return rewards @ (gamma ** np.arange(h))


def q_loss(
    twin: TwinQ,
    v_net: VNet,
    obs: np.ndarray,
    latents: np.ndarray,
    returns: np.ndarray,
    next_obs: np.ndarray,
    gamma_eff: float,
    weights: np.ndarray,
    targets_override: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray, dict]:
    """Importance-weighted squared Bellman error, summed over the twins.

    Target: R + gamma_eff * V(s_{t+H}) (or an override, e.g. the sampled-max
    baseline).  Returns (loss, new priorities |TD| + 1e-3, diagnostics);
    gradients reach the twins only.
    """
    if targets_override is None:
        v_next = v_net(next_obs).data
        target = returns + gamma_eff * v_next
    else:
        target = targets_override
    w = Tensor(weights)
    q1, q2 = twin.both(obs, latents)
    td1 = sub(Tensor(target), q1)
    td2 = sub(Tensor(target), q2)
    loss = mul(square(td1), w).mean() + mul(square(td2), w).mean()
    new_priorities = 0.5 * (np.abs(td1.data) + np.abs(td2.data)) + 1e-3
    diag = {"target": target, "td1": td1.data, "td2": td2.data}
    return loss, new_priorities, diag


def ldcq_target(
    returns: float | np.ndarray,
    next_obs: np.ndarray,
    model: LatentDiffusion,
    target_twin: TwinQ,
    gamma_eff: float,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Bootstrapped target R + gamma * max over n sampled next-state skills
    of the clipped target Q.  ``next_obs`` may be a single row or a batch."""
    if n < 1:
        raise ValueError("n must be >= 1")
    next_obs = np.atleast_2d(np.asarray(next_obs, dtype=np.float64))
    batch = next_obs.shape[0]
    tiled = np.repeat(next_obs, n, axis=0)
    zs = model.sample_batch(tiled, rng)
    q = target_twin.min_q(tiled, zs).reshape(batch, n)
    return np.asarray(returns) + gamma_eff * q.max(axis=1)


# ---------------------------------------------------------------------------
# prioritized replay
# ---------------------------------------------------------------------------


class SumTree:
    """Binary indexed tree over leaf weights with prefix-sum descent."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        size = 1
        while size < capacity:
            size *= 2
        self._size = size
        self._tree = np.zeros(2 * size)

    def update(self, idx: int, value: float) -> None:
        node = self._size + idx
        delta = value - self._tree[node]
        while node >= 1:
            self._tree[node] += delta
            node //= 2

    def value(self, idx: int) -> float:
        return float(self._tree[self._size + idx])

    def total(self) -> float:
        return float(self._tree[1])

    def find(self, prefix: float) -> int:
        """Leaf index i such that prefix lands in i's cumulative span."""
        node = 1
        while node < self._size:
            left = 2 * node
            if prefix <= self._tree[left]:
                node = left
            else:
                prefix -= self._tree[left]
                node = left + 1
        return min(node - self._size, self.capacity - 1)


class PerBuffer:
    """Proportional prioritized replay over a fixed replay table.

    Sampling probability of item i is p_i**alpha / sum_k p_k**alpha; the
    tree stores p**alpha so the root is that normalizer.  ``beta`` anneals
    externally from beta_start toward 1.
    """

    def __init__(
        self,
        items: dict[str, np.ndarray],
        alpha: float = 0.7,
        beta: float = 0.3,
        initial_priority: float = 1.0,
    ):
        lengths = {k: len(v) for k, v in items.items()}
        if len(set(lengths.values())) != 1:
            raise ValueError(f"ragged replay columns: {lengths}")
        self.items = items
        self.size = next(iter(lengths.values()))
        self.alpha = alpha
        self.beta = beta
        self.tree = SumTree(self.size)
        self._priorities = np.full(self.size, float(initial_priority))
        for i in range(self.size):
            self.tree.update(i, initial_priority**alpha)

    def update_priorities(self, indices: np.ndarray, priorities: np.ndarray) -> None:
        for i, p in zip(np.asarray(indices), np.asarray(priorities)):
            if p <= 0.0:
                raise ValueError(f"priority must be positive, got {p}")
            self._priorities[i] = p
            self.tree.update(int(i), float(p) ** self.alpha)

    def priorities(self) -> np.ndarray:
        return self._priorities.copy()

    def sample(self, k: int, rng: np.random.Generator):
        return per_sample(self, k, rng)


def per_sample(buffer: PerBuffer, k: int, rng: np.random.Generator):
    """Stratified proportional sampling: k strata over the cumulative mass.

    Returns (items, indices, importance weights); weights are (N * P)**-beta
    normalized by the batch max so they lie in (0, 1] with max exactly 1.
    """
    if buffer.size == 0:
        raise ValueError("empty buffer")
    if k > buffer.size:
        warnings.warn(f"sampling {k} > buffer size {buffer.size}: with replacement")
    total = buffer.tree.total()
    bounds = (np.arange(k) + rng.random(k)) * (total / k)
    indices = np.array([buffer.tree.find(b) for b in bounds], dtype=np.int64)
    mass = np.array([buffer.tree.value(int(i)) for i in indices])
    probs = mass / total
    w = (buffer.size * probs) ** (-buffer.beta)
    w = w / w.max()
    items = {key: col[indices] for key, col in buffer.items.items()}
    return items, indices, w


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def build_replay(
    vae: SkillVae,
    ds: OfflineDataset,
    horizon: int,
    gamma: float,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Replay table (obs, latent, discounted window return, end obs) from
    every window, latents as posterior means."""
    table = encode_dataset(vae, ds, horizon, seed=seed)
    returns = discounted_return(table["rewards"], gamma)
    return {
        "obs": table["start_obs"],
        "latents": table["latents"],
        "returns": returns,
        "next_obs": table["end_obs"],
    }


@dataclass
class QTrainResult:
    twin: TwinQ
    twin_target: TwinQ
    v_net: VNet
    history: list[dict[str, float]] = field(default_factory=list)


def train_q(
    ds: OfflineDataset,
    vae: SkillVae,
    model: LatentDiffusion | None,
    cfg: QLearnConfig,
    horizon: int | None = None,
    latent_source=None,
    step_hook=None,
    metrics_hook=None,
) -> QTrainResult:
    """Alternating V / twin-Q updates on PER batches with Polyak targets.

    ``latent_source(obs, rng) -> latents`` overrides the per-step diffusion
    sampling used by the value update (ablation hook: pass dataset latents
    to recover plain expectile regression).  ``step_hook(step, diag)`` sees
    per-step diagnostics including both target-twin evaluations and the
    clipped target actually used.
    """
    horizon = vae.cfg.horizon if horizon is None else horizon
    replay = build_replay(vae, ds, horizon, cfg.gamma, seed=cfg.seed)
    buffer = PerBuffer(replay, alpha=cfg.per_alpha, beta=cfg.per_beta_start)

    init_rng = make_rng(cfg.seed, 301)
    twin = TwinQ(cfg, init_rng)
    v_net = VNet(cfg, init_rng)
    twin_target = TwinQ(cfg, make_rng(cfg.seed, 302))
    twin_target.copy_from(twin)

    q_params = twin.params()
    v_params = v_net.params()
    opt_q = Adam(q_params, lr=cfg.lr)
    opt_v = Adam(v_params, lr=cfg.lr)
    sched = StepDecaySchedule(cfg.lr, cfg.sched_step, cfg.sched_factor)
    epoch_len = max(1, buffer.size // cfg.batch)
    gamma_eff = cfg.gamma**horizon if cfg.gamma_pow_h else cfg.gamma

    if latent_source is None:
        if model is None:
            raise ValueError("need a diffusion model or an explicit latent_source")
        latent_source = lambda obs, rng: model.sample_batch(obs, rng)
    if cfg.ldcq_mode and model is None:
        raise ValueError("the sampled-max target mode needs a diffusion model")

    result = QTrainResult(twin=twin, twin_target=twin_target, v_net=v_net)
    for step in range(cfg.steps):
        rng = make_rng(cfg.seed, 31, step)
        lr = sched.lr_at(step // epoch_len)
        opt_q.lr = lr
        opt_v.lr = lr
        frac = step / max(1, cfg.steps - 1)
        buffer.beta = cfg.per_beta_start + frac * (cfg.per_beta_end - cfg.per_beta_start)

        items, indices, weights = per_sample(buffer, cfg.batch, rng)

        # value update on freshly sampled latents; Q parameters untouched
        sampled = latent_source(items["obs"], rng)
        with Tape() as tape_v:
            loss_v, diag_v = value_loss(
                v_net, twin_target, items["obs"], sampled, cfg.expectile_tau
            )
        opt_v.step(tape_v.grad(loss_v, v_params))

        # twin-Q update on dataset tuples; V parameters untouched
        override = None
        if cfg.ldcq_mode:
            override = ldcq_target(
                items["returns"], items["next_obs"], model, twin_target,
                gamma_eff, cfg.ldcq_samples, rng,
            )
        with Tape() as tape_q:
            loss_q, new_prio, diag_q = q_loss(
                twin, v_net, items["obs"], items["latents"], items["returns"],
                items["next_obs"], gamma_eff, weights, targets_override=override,
            )
        opt_q.step(tape_q.grad(loss_q, q_params))

        buffer.update_priorities(indices, new_prio)
        soft_update(twin_target, twin, cfg.target_rho)

        row = {
            "step": step,
            "value_loss": float(loss_v.data),
            "q_loss": float(loss_q.data),
            "mean_priority": float(new_prio.mean()),
            "lr": lr,
            "beta": buffer.beta,
        }
        if not np.isfinite(row["value_loss"]) or not np.isfinite(row["q_loss"]):
            raise FloatingPointError(f"non-finite loss at step {step}: {row}")
        result.history.append(row)
        if metrics_hook is not None:
            metrics_hook(row)
        if step_hook is not None:
            step_hook(step, {**diag_v, **diag_q, "indices": indices, "weights": weights})
    return result
