"""Stage 2: DDPM over skill latents conditioned on the current observation.

The forward process follows the closed-form marginal z_j = sqrt(abar_j) z0
+ sqrt(1 - abar_j) eps on a linear beta schedule.  The denoiser predicts
the clean latent directly and trains with a capped signal-to-noise weight
min(SNR_j, gamma)/SNR_j; the observation embedding is randomly replaced by
a learned null token so sampling can be conditional, unconditional, or
guided.  Reverse sampling uses the exact posterior mean with the final
step returning the model's clean-latent prediction.

The trunk is a dense bottleneck (widths 64 -> 32 -> 16 -> 32 -> 64) with
skip connections; latent vectors are 16-wide so no convolutions are used.
Latents are standardized to zero mean / unit variance per dimension before
training and destandardized on the way out of the sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, add, make_rng, mul, square, sub
from .maze import OfflineDataset
from .nn import Adam, Linear, MLP, Module, sinusoidal_embedding
from .skill_vae import SkillVae, encode_dataset

__all__ = [
    "NoiseSchedule",
    "DiffusionConfig",
    "Denoiser",
    "LatentDiffusion",
    "forward_diffuse",
    "min_snr_weight",
    "diffusion_loss",
    "diffusion_loss_given",
    "reverse_sample",
    "train_denoiser_on_pairs",
    "train_diffusion",
]

_REF_STEPS = 500  # step count at which the canonical linear endpoints apply


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables beta_1..T, alpha_j, abar_j with the abar_0 = 1 convention.

    ``linear`` scales the canonical (1e-4, 2e-2) endpoints by 500/T so the
    total injected noise is preserved when running fewer steps; at T=500
    the endpoints are exactly canonical and abar_T < 0.05.
    """

    betas: np.ndarray  # (T,), beta for j = 1..T
    alpha_bars: np.ndarray  # (T+1,), abar_0 = 1

    @staticmethod
    def linear(steps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if steps < 1:
            raise ValueError("steps must be >= 1")
        scale = _REF_STEPS / steps
        betas = np.minimum(np.linspace(beta_start * scale, beta_end * scale, steps), 0.999)
        if not ((betas > 0.0) & (betas < 1.0)).all():
            raise ValueError(f"betas out of (0, 1) for T={steps}")
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return NoiseSchedule(betas=betas, alpha_bars=abar)

    @property
    def steps(self) -> int:
        return len(self.betas)

    def snr(self, j) -> np.ndarray:
        ab = self.alpha_bars[np.asarray(j)]
        return ab / (1.0 - ab)


def min_snr_weight(sched: NoiseSchedule, j, gamma: float) -> np.ndarray:
    """min(SNR_j, gamma) / SNR_j in (0, 1]; exactly 1 on low-SNR steps."""
    snr = sched.snr(j)
    return np.minimum(snr, gamma) / snr


def forward_diffuse(z0: np.ndarray, j, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form noising z_j = sqrt(abar_j) z0 + sqrt(1-abar_j) eps.

    ``j`` may be a scalar or per-row array in [0, T]; j=0 returns z0.
    """
    j = np.asarray(j)
    if np.any(j < 0) or np.any(j > sched.steps):
        raise ValueError(f"timestep out of [0, {sched.steps}]: {j}")
    ab = sched.alpha_bars[j]
    ab = np.expand_dims(ab, -1) if np.ndim(z0) > np.ndim(ab) else ab
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


@dataclass
class DiffusionConfig:
    steps: int = 500
    latent_dim: int = 16
    obs_dim: int = 4
    lr: float = 1e-4
    batch: int = 128
    epochs: int = 450
    drop_prob: float = 0.1
    snr_gamma: float = 5.0
    embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.drop_prob <= 1.0):
            raise ValueError("drop_prob must be in [0, 1]")


class Denoiser(Module):
    """Clean-latent predictor: zhat0 = f(z_j, obs, j).

    Observation and timestep embeddings are added to the projected latent;
    the trunk narrows then widens with skip connections at equal widths.
    The observation projection is zero-initialized so an untrained (or
    never-trained, drop_prob=1) conditioning path is exactly inert.
    """

    def __init__(self, cfg: DiffusionConfig):
        rng = make_rng(cfg.seed, 201)
        e = cfg.embed_dim
        self.cfg = cfg
        self.z_proj = Linear(rng, cfg.latent_dim, e)
        self.t_proj = Linear(rng, e, e)
        self.s_proj = Linear(rng, cfg.obs_dim, e)
        self.s_proj.w.data[:] = 0.0
        self.s_proj.b.data[:] = 0.0
        self.null_token = Tensor(np.zeros(e), requires_grad=True)
        self.down1 = MLP(rng, e, (e,), e // 2)
        self.down2 = MLP(rng, e // 2, (e // 2,), e // 4)
        self.mid = MLP(rng, e // 4, (e // 4,), e // 4)
        self.up1 = MLP(rng, e // 4, (e // 2,), e // 2)
        self.up2 = MLP(rng, e // 2, (e,), e)
        self.head = Linear(rng, e, cfg.latent_dim)
        self._time_table = sinusoidal_embedding(np.arange(cfg.steps + 1), e)

    def __call__(self, z_j: np.ndarray, obs: np.ndarray, j, drop_mask=None) -> Tensor:
        batch = z_j.shape[0]
        e = self.cfg.embed_dim
        j_arr = np.broadcast_to(np.asarray(j, dtype=np.int64), (batch,))
        t_emb = self.t_proj(Tensor(self._time_table[j_arr]))
        s_emb = self.s_proj(Tensor(np.asarray(obs)))
        if drop_mask is not None and np.any(drop_mask):
            keep = np.repeat((~np.asarray(drop_mask))[:, None].astype(float), e, axis=1)
            drop = 1.0 - keep
            s_emb = add(mul(s_emb, Tensor(keep)), mul(Tensor(drop), self.null_token))
        x0 = add(add(self.z_proj(Tensor(np.asarray(z_j))), t_emb), s_emb)
        d1 = self.down1(x0)
        d2 = self.down2(d1)
        m = add(self.mid(d2), d2)
        u1 = add(self.up1(m), d1)
        u2 = add(self.up2(u1), x0)
        return self.head(u2)


def diffusion_loss_given(
    den: Denoiser,
    sched: NoiseSchedule,
    obs: np.ndarray,
    z0: np.ndarray,
    j: np.ndarray,
    eps: np.ndarray,
    drop_mask: np.ndarray,
    snr_gamma: float,
) -> Tensor:
    """Deterministic core of the training loss: per-item capped-SNR weight
    times the squared clean-latent prediction error, averaged over items."""
    z_j = forward_diffuse(z0, j, eps, sched)
    pred = den(z_j, obs, j, drop_mask)
    per_item = square(sub(pred, Tensor(z0))).sum(axis=-1)
    w = min_snr_weight(sched, j, snr_gamma)
    return mul(per_item, Tensor(w)).mean()


def diffusion_loss(
    den: Denoiser,
    sched: NoiseSchedule,
    obs: np.ndarray,
    z0: np.ndarray,
    cfg: DiffusionConfig,
    rng: np.random.Generator,
) -> Tensor:
    batch = z0.shape[0]
    j = rng.integers(1, sched.steps + 1, size=batch)
    eps = rng.standard_normal(z0.shape)
    drop_mask = rng.random(batch) < cfg.drop_prob
    return diffusion_loss_given(den, sched, obs, z0, j, eps, drop_mask, cfg.snr_gamma)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _denoise_step_coeffs(sched: NoiseSchedule, j: int) -> tuple[float, float, float]:
    """Posterior-mean coefficients (on zhat0 and z_j) and posterior variance."""
    beta = sched.betas[j - 1]
    ab_j = sched.alpha_bars[j]
    ab_prev = sched.alpha_bars[j - 1]
    alpha = 1.0 - beta
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_j)
    c1 = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_j)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_j)
    return c0, c1, var


@dataclass
class LatentDiffusion:
    """Trained sampler bundle: denoiser + schedule + latent standardizer."""

    denoiser: Denoiser
    sched: NoiseSchedule
    z_mean: np.ndarray
    z_std: np.ndarray
    cfg: DiffusionConfig

    def sample_batch(
        self,
        obs: np.ndarray,
        rng: np.random.Generator,
        guidance_w: float = 0.0,
    ) -> np.ndarray:
        """One latent per observation row, denoised from pure noise."""
        obs = np.asarray(obs, dtype=np.float64)
        batch = obs.shape[0]
        ld = self.cfg.latent_dim
        z = rng.standard_normal((batch, ld))
        for j in range(self.sched.steps, 0, -1):
            zhat = self.denoiser(z, obs, j, drop_mask=None).data
            if guidance_w != 0.0:
                null = self.denoiser(z, obs, j, drop_mask=np.ones(batch, bool)).data
                zhat = (1.0 + guidance_w) * zhat - guidance_w * null
            c0, c1, var = _denoise_step_coeffs(self.sched, j)
            mean = c0 * zhat + c1 * z
            if j > 1:
                z = mean + np.sqrt(var) * rng.standard_normal((batch, ld))
            else:
                z = mean
        return z * self.z_std + self.z_mean

    def sample(
        self,
        obs: np.ndarray,
        n: int,
        rng: np.random.Generator,
        guidance_w: float = 0.0,
    ) -> np.ndarray:
        """n latents conditioned on a single observation."""
        if n < 1:
            raise ValueError("n must be >= 1")
        tiled = np.tile(np.asarray(obs, dtype=np.float64)[None, :], (n, 1))
        return self.sample_batch(tiled, rng, guidance_w)


def reverse_sample(
    obs: np.ndarray,
    n: int,
    model: LatentDiffusion,
    rng: np.random.Generator,
    guidance_w: float = 0.0,
) -> np.ndarray:
    """Functional alias for ``LatentDiffusion.sample``."""
    return model.sample(obs, n, rng, guidance_w)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_denoiser_on_pairs(
    obs: np.ndarray,
    latents: np.ndarray,
    cfg: DiffusionConfig,
    metrics_hook=None,
) -> tuple[LatentDiffusion, list[dict[str, float]]]:
    """Adam over the capped-SNR loss on (observation, clean latent) pairs."""
    sched = NoiseSchedule.linear(cfg.steps)
    den = Denoiser(cfg)
    z_mean = latents.mean(axis=0)
    z_std = np.maximum(latents.std(axis=0), 1e-6)
    z_n = (latents - z_mean) / z_std
    params = den.params()
    opt = Adam(params, lr=cfg.lr)
    n = obs.shape[0]
    history: list[dict[str, float]] = []
    initial = None
    bad_epochs = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, 21, epoch).permutation(n)
        rng = make_rng(cfg.seed, 22, epoch)
        total, batches = 0.0, 0
        for lo in range(0, n, cfg.batch):
            idx = order[lo : lo + cfg.batch]
            with Tape() as tape:
                loss = diffusion_loss(den, sched, obs[idx], z_n[idx], cfg, rng)
            if not np.isfinite(loss.data):
                raise FloatingPointError("non-finite diffusion loss")
            opt.step(tape.grad(loss, params))
            total += float(loss.data)
            batches += 1
        row = {"epoch": epoch, "loss": total / batches}
        history.append(row)
        if metrics_hook is not None:
            metrics_hook(row)
        if initial is None:
            initial = row["loss"]
        bad_epochs = bad_epochs + 1 if row["loss"] > 10.0 * abs(initial) else 0
        if bad_epochs >= 3:
            raise RuntimeError(
                f"diffusion training diverged: {row['loss']:.3g} vs initial {initial:.3g}"
            )
    model = LatentDiffusion(denoiser=den, sched=sched, z_mean=z_mean, z_std=z_std, cfg=cfg)
    return model, history


def train_diffusion(
    ds: OfflineDataset,
    vae: SkillVae,
    cfg: DiffusionConfig,
    horizon: int | None = None,
    metrics_hook=None,
) -> tuple[LatentDiffusion, list[dict[str, float]]]:
    """Encode every window to (start obs, posterior mean) and fit the DDPM."""
    horizon = vae.cfg.horizon if horizon is None else horizon
    table = encode_dataset(vae, ds, horizon, seed=cfg.seed)
    return train_denoiser_on_pairs(table["start_obs"], table["latents"], cfg, metrics_hook)
