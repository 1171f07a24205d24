"""Stage 1: sequence VAE over H-step segments.

A bidirectional GRU encoder maps an (observation, action) window to a
diagonal-Gaussian skill latent.  Three heads consume it: a policy decoder
reconstructing each action from (state, latent), a state decoder predicting
the end-of-window state from (start state, latent), and a state-conditioned
Gaussian prior that the posterior is pulled toward by a beta-weighted KL.

The action likelihood uses a fixed log-std so its NLL is a scaled MSE; the
state decoder trains with a unit-weight squared error.  All observations
entering the networks are pre-normalized to roughly [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    clip,
    concat,
    exp,
    gaussian_nll,
    kl_diag_gaussians,
    make_rng,
    mul,
    square,
    sub,
)
from .maze import OfflineDataset, Segments, normalize_obs, slice_segments
from .nn import Adam, BiGRUEncoder, Linear, MLP, Module

__all__ = ["VaeConfig", "SkillVae", "elbo_loss", "train_vae", "encode_dataset"]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class VaeConfig:
    horizon: int = 10
    latent_dim: int = 16
    beta: float = 0.1
    lr: float = 5e-5
    batch: int = 128
    epochs: int = 100
    gru_hidden: int = 32
    mlp_hidden: tuple[int, ...] = (64, 64)
    action_log_std: float = -1.0
    state_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")


class SkillVae(Module):
    def __init__(self, cfg: VaeConfig, obs_dim: int = 4, act_dim: int = 2):
        rng = make_rng(cfg.seed, 101)
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        ld = cfg.latent_dim
        self.encoder = BiGRUEncoder(rng, obs_dim + act_dim, cfg.gru_hidden, n_layers=2)
        self.enc_mu = Linear(rng, self.encoder.out_dim, ld)
        self.enc_log_std = Linear(rng, self.encoder.out_dim, ld)
        self.policy_dec = MLP(rng, obs_dim + ld, cfg.mlp_hidden, act_dim)
        self.state_dec = MLP(rng, obs_dim + ld, cfg.mlp_hidden, obs_dim)
        self.prior = MLP(rng, obs_dim, cfg.mlp_hidden, 2 * ld)

    # -- encoder -----------------------------------------------------------

    def _encoder_steps(self, states: np.ndarray, actions: np.ndarray) -> list[Tensor]:
        """Window of H+1 states and H actions -> H+1 per-step inputs; the
        final step pairs the closing state with a zero action."""
        h = actions.shape[1]
        steps = [
            Tensor(np.concatenate([states[:, i], actions[:, i]], axis=1))
            for i in range(h)
        ]
        pad = np.zeros((states.shape[0], self.act_dim))
        steps.append(Tensor(np.concatenate([states[:, h], pad], axis=1)))
        return steps

    def encode(self, states: np.ndarray, actions: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, H+1, obs), (B, H, act) -> posterior (mu, log_std)."""
        summary = self.encoder(self._encoder_steps(states, actions))
        mu = self.enc_mu(summary)
        log_std = clip(self.enc_log_std(summary), LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def encode_mean(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mu, _ = self.encode(states, actions)
        return mu.data

    @staticmethod
    def reparameterize(mu: Tensor, log_std: Tensor, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(mu.shape)
        return add(mu, mul(exp(log_std), eps))

    # -- decoders / prior ---------------------------------------------------

    def decode_action(self, state, latent) -> Tensor:
        return self.policy_dec(concat([_t(state), _t(latent)], axis=1))

    def decode_state(self, state, latent) -> Tensor:
        return self.state_dec(concat([_t(state), _t(latent)], axis=1))

    def prior_params(self, state) -> tuple[Tensor, Tensor]:
        out = self.prior(_t(state))
        ld = self.cfg.latent_dim
        return out[:, :ld], clip(out[:, ld:], LOG_STD_MIN, LOG_STD_MAX)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def elbo_loss(
    vae: SkillVae,
    states: np.ndarray,
    actions: np.ndarray,
    rng: np.random.Generator,
    beta: float | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Minimized objective: summed action NLL + beta * KL(posterior || prior)
    + state-prediction squared error.  Returns (scalar loss, term values)."""
    cfg = vae.cfg
    beta = cfg.beta if beta is None else beta
    batch = states.shape[0]
    horizon = actions.shape[1]

    mu, log_std = vae.encode(states, actions)
    z = vae.reparameterize(mu, log_std, rng)

    nll_total = None
    for i in range(horizon):
        mean_i = vae.decode_action(states[:, i], z)
        nll_i = gaussian_nll(mean_i, cfg.action_log_std, actions[:, i])
        nll_total = nll_i if nll_total is None else add(nll_total, nll_i)
    recon = nll_total.mean()

    mu_p, log_std_p = vae.prior_params(states[:, 0])
    kl = kl_diag_gaussians(mu, log_std, mu_p, log_std_p).mean()

    pred = vae.decode_state(states[:, 0], z)
    state_err = square(sub(pred, Tensor(states[:, horizon]))).sum(axis=-1).mean()

    loss = add(add(recon, mul(kl, beta)), mul(state_err, cfg.state_weight))
    terms = {
        "nll": float(recon.data),
        "kl": float(kl.data),
        "state": float(state_err.data),
        "total": float(loss.data),
    }
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite VAE loss: {terms}")
    return loss, terms


def _segment_arrays(ds: OfflineDataset, cfg: VaeConfig) -> Segments:
    segs = slice_segments(ds, cfg.horizon, seed=cfg.seed)
    segs.states = normalize_obs(ds.spec, segs.states)
    return segs


def train_vae(
    ds: OfflineDataset,
    cfg: VaeConfig,
    metrics_hook=None,
) -> tuple[SkillVae, list[dict[str, float]]]:
    """Adam over the ELBO for cfg.epochs; returns the model and the
    per-epoch loss curve.  Aborts if the loss exceeds 10x its initial
    value for three consecutive epochs."""
    vae = SkillVae(cfg)
    segs = _segment_arrays(ds, cfg)
    params = vae.params()
    opt = Adam(params, lr=cfg.lr)
    history: list[dict[str, float]] = []
    initial = None
    bad_epochs = 0
    n = len(segs)
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, 11, epoch).permutation(n)
        noise_rng = make_rng(cfg.seed, 12, epoch)
        totals: dict[str, float] = {}
        n_batches = 0
        for lo in range(0, n, cfg.batch):
            idx = order[lo : lo + cfg.batch]
            with Tape() as tape:
                loss, terms = elbo_loss(
                    vae, segs.states[idx], segs.actions[idx], noise_rng
                )
            opt.step(tape.grad(loss, params))
            for k, v in terms.items():
                totals[k] = totals.get(k, 0.0) + v
            n_batches += 1
        epoch_terms = {k: v / n_batches for k, v in totals.items()}
        epoch_terms["epoch"] = epoch
        history.append(epoch_terms)
        if metrics_hook is not None:
            metrics_hook(epoch_terms)
        if initial is None:
            initial = epoch_terms["total"]
        bad_epochs = bad_epochs + 1 if epoch_terms["total"] > 10.0 * abs(initial) else 0
        if bad_epochs >= 3:
            raise RuntimeError(
                f"VAE training diverged: loss {epoch_terms['total']:.3g} vs "
                f"initial {initial:.3g} for 3 epochs"
            )
    return vae, history


def encode_dataset(
    vae: SkillVae, ds: OfflineDataset, horizon: int, seed: int = 0, batch: int = 512
) -> dict[str, np.ndarray]:
    """Posterior means for every window: the (state, latent, return, next
    state) table shared by the diffusion and Q stages.

    Returns normalized start/end observations, latents, per-window
    discounted return placeholder fields left to the caller's gamma.
    """
    segs = slice_segments(ds, horizon, seed=seed)
    states_n = normalize_obs(ds.spec, segs.states)
    lat = np.zeros((len(segs), vae.cfg.latent_dim))
    for lo in range(0, len(segs), batch):
        hi = min(lo + batch, len(segs))
        lat[lo:hi] = vae.encode_mean(states_n[lo:hi], segs.actions[lo:hi])
    return {
        "start_obs": states_n[:, 0],
        "end_obs": states_n[:, -1],
        "latents": lat,
        "rewards": segs.rewards,
        "raw_segments": segs,
    }
