"""Latent diffusion over motion tokens: cosine schedule, clean-latent
denoiser with AdaLN timestep modulation and masked condition fusion,
classifier-free guidance, and DDPM/DDIM samplers.

The diffusion sequence has N+1 tokens: per-frame latents plus the global
token g in the final slot, denoised jointly with the frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ShapeMismatch, StepOutOfRange, UnknownKind
from .hand_model import HandSkeleton
from .joint_vae import CONDITION_KINDS, rec_loss
from .transformer import CrossAttention, FeedForward, RopeSelfAttention

# Modalities that own an unconditional token: the motion latents themselves
# (usable for latent infilling), each structured condition, and vision.
UNCOND_KINDS = ("motion",) + CONDITION_KINDS + ("vision",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine-beta schedule arrays indexed by t = 1..T."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def _check(self, t: int, lo: int) -> None:
        if not lo <= t <= self.n_steps:
            raise StepOutOfRange(f"step {t} outside [{lo}, {self.n_steps}]")

    def beta(self, t: int) -> float:
        self._check(t, 1)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t, 1)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product, with the alpha_bar(0) := 1 convention."""
        self._check(t, 0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def cosine_schedule(n_steps: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine noise schedule: alpha_bar(t) = f(t)/f(0), betas clipped <= 0.999.

    f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2). Alpha-bars are recomputed as the
    cumulative product of (1 - beta) so clipping keeps the arrays consistent.
    """
    if n_steps < 1:
        raise ValueError("schedule needs at least one step")
    t = np.arange(n_steps + 1, dtype=np.float64)
    f = np.cos(((t / n_steps + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.0, 0.999)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def forward_diffuse(z0: torch.Tensor, t: int, eps: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps; t = 0 is z0."""
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0/eps shapes differ: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def posterior_mean(z0_hat: torch.Tensor, z_t: torch.Tensor, t: int,
                   sched: NoiseSchedule) -> torch.Tensor:
    """Mean of q(z_{t-1} | z_t, z0_hat) for t >= 1 (alpha_bar_0 := 1)."""
    if t < 1:
        raise StepOutOfRange(f"posterior mean needs t >= 1, got {t}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    beta_t = sched.beta(t)
    alpha_t = sched.alpha(t)
    c0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    c1 = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0 * z0_hat + c1 * z_t


def posterior_variance(t: int, sched: NoiseSchedule) -> float:
    """beta_tilde_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)."""
    if t < 1:
        raise StepOutOfRange(f"posterior variance needs t >= 1, got {t}")
    return sched.beta(t) * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t))


def cfg_combine(out_uncond: torch.Tensor, out_cond: torch.Tensor,
                w: float) -> torch.Tensor:
    """Classifier-free guidance: uncond + w * (cond - uncond)."""
    if out_uncond.shape != out_cond.shape:
        raise ShapeMismatch("guidance operands must share a shape")
    return out_uncond + w * (out_cond - out_uncond)


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "ddim"
    steps: int = 10
    cfg_scale: float = 2.0
    eta: float = 0.0

    def __post_init__(self):
        if self.method not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampling method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


@dataclass(frozen=True)
class DiffLossWeights:
    w_rec: float = 1.0

    def __post_init__(self):
        if self.w_rec < 0:
            raise ValueError("w_rec must be non-negative")


def condition_dropout(z_c: torch.Tensor, uncond_token: torch.Tensor, p: float,
                      rng: torch.Generator) -> torch.Tensor:
    """Replace whole condition sequences with the unconditional token.

    Each batch element independently drops with probability p; a dropped
    element has every frame token replaced.

    Args:
        z_c: (B, N, d) condition latents.
        uncond_token: (d,) learnable unconditional token for this modality.
        p: drop probability in [0, 1].
        rng: torch generator driving the draws.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if p == 0.0:
        return z_c
    drop = torch.rand(z_c.shape[0], generator=rng, device=z_c.device) < p
    return torch.where(drop[:, None, None], uncond_token.to(z_c.dtype), z_c)


class TimestepEmbedding(nn.Module):
    """Sinusoidal step embedding followed by a two-layer MLP."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.net = nn.Sequential(
            nn.Linear(d_model, d_model), nn.SiLU(), nn.Linear(d_model, d_model))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.d_model // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
        args = t.float()[:, None] * freqs[None]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        return self.net(emb.to(self.net[0].weight.dtype))


class AdaLayerNorm(nn.Module):
    """LayerNorm whose scale/shift come from the timestep embedding."""

    def __init__(self, d_model: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model, elementwise_affine=False)
        self.mod = nn.Linear(d_model, 2 * d_model)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.mod(F.silu(t_emb)).chunk(2, dim=-1)
        return self.norm(x) * (1.0 + scale[:, None]) + shift[:, None]


class DenoiserBlock(nn.Module):
    """AdaLN self-attention, cross-attention to hand tokens, AdaLN FF."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.ada1 = AdaLayerNorm(d)
        self.self_attn = RopeSelfAttention(d, cfg.denoiser_heads, cfg.dropout,
                                           cfg.rope_base)
        self.ln_cross = nn.LayerNorm(d)
        self.cross_attn = CrossAttention(d, cfg.denoiser_heads, cfg.dropout)
        self.ada2 = AdaLayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_dim, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout) if cfg.dropout > 0 else nn.Identity()

    def forward(self, x, t_emb, hand, positions):
        x = x + self.dropout(self.self_attn(self.ada1(x, t_emb), positions))
        x = x + self.dropout(self.cross_attn(self.ln_cross(x), hand))
        x = x + self.dropout(self.ff(self.ada2(x, t_emb)))
        return x


class Denoiser(nn.Module):
    """Clean-latent predictor over the N+1 token diffusion sequence.

    Structured condition latents are fused additively after masked frames are
    gated to the modality's unconditional token; hand (vision) tokens enter
    through cross-attention in every layer, with vision-masked frames replaced
    by the vision unconditional token.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.time_embed = TimestepEmbedding(d)
        self.blocks = nn.ModuleList([DenoiserBlock(cfg) for _ in range(cfg.denoiser_layers)])
        self.final_ln = nn.LayerNorm(d)
        self.out = nn.Linear(d, d)
        self.uncond = nn.ParameterDict({
            kind: nn.Parameter(torch.randn(d) * 0.02) for kind in UNCOND_KINDS})

    def gate(self, kind: str, z_c: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Substitute the modality's unconditional token on masked frames."""
        if kind not in self.uncond:
            raise UnknownKind(f"no unconditional token for kind {kind!r}")
        return torch.where(mask.bool()[..., None], z_c,
                           self.uncond[kind].to(z_c.dtype))

    def forward(self, z_t: torch.Tensor, t: torch.Tensor,
                conditions: Optional[Dict[str, Tuple[torch.Tensor, torch.Tensor]]] = None,
                hand_tokens: Optional[torch.Tensor] = None,
                vision_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Predict clean latents.

        Args:
            z_t: (B, N+1, d) noisy latents; final slot is the g token.
            t: (B,) integer steps.
            conditions: kind -> (z_c (B,N,d), mask (B,N)); masked frames are
                gated to the kind's unconditional token before additive fusion.
            hand_tokens: (B, N, d) perceptron output, or None for the fully
                unconditional vision stream.
            vision_mask: (B, N) flags; frames at 0 use the vision
                unconditional token as their hand token.

        Returns:
            (B, N+1, d) predicted clean latents.
        """
        if z_t.ndim != 3 or z_t.shape[-1] != self.cfg.d_model:
            raise ShapeMismatch(f"z_t must be (B,N+1,{self.cfg.d_model}), got {tuple(z_t.shape)}")
        b, n_plus, d = z_t.shape
        n = n_plus - 1
        if n < 1:
            raise ShapeMismatch("need at least one frame token plus the g slot")

        x = z_t
        if conditions:
            fused = torch.zeros_like(z_t[:, :n])
            for kind, (z_c, mask) in conditions.items():
                if z_c.shape != (b, n, d):
                    raise ShapeMismatch(
                        f"condition {kind} must be (B,{n},{d}), got {tuple(z_c.shape)}")
                fused = fused + self.gate(kind, z_c, mask)
            x = torch.cat([x[:, :n] + fused, x[:, n:]], dim=1)

        if hand_tokens is None:
            hand = self.uncond["vision"].to(z_t.dtype).expand(b, n, d)
        else:
            if hand_tokens.shape != (b, n, d):
                raise ShapeMismatch(
                    f"hand tokens must be (B,{n},{d}), got {tuple(hand_tokens.shape)}")
            hand = hand_tokens
            if vision_mask is not None:
                hand = self.gate("vision", hand, vision_mask)

        t_emb = self.time_embed(torch.as_tensor(t, device=z_t.device).reshape(b))
        positions = torch.arange(n_plus, device=z_t.device)
        for block in self.blocks:
            x = block(x, t_emb, hand, positions)
        return self.out(self.final_ln(x))


def denoiser_loss(z0: torch.Tensor, z0_hat: torch.Tensor,
                  x: torch.Tensor, x_hat: torch.Tensor,
                  weights: DiffLossWeights, w_joint_rec: float = 0.5,
                  skel: Optional[HandSkeleton] = None) -> Tuple[torch.Tensor, Dict[str, float]]:
    """MSE on clean latents plus the decoded-motion reconstruction loss."""
    if z0.shape != z0_hat.shape:
        raise ShapeMismatch("z0/z0_hat shapes differ")
    if x.shape != x_hat.shape:
        raise ShapeMismatch("x/x_hat shapes differ")
    l_latent = F.mse_loss(z0_hat, z0)
    l_rec = rec_loss(x_hat, x, w_joint_rec, skel) if weights.w_rec != 0.0 \
        else torch.zeros_like(l_latent)
    total = l_latent + weights.w_rec * l_rec
    return total, {"latent_mse": float(l_latent.detach()),
                   "rec": float(l_rec.detach())}


# -- samplers ---------------------------------------------------------------

PredictFn = Callable[[torch.Tensor, int], torch.Tensor]


def ddim_steps(n_steps: int, total: int) -> list:
    """Evenly spaced decreasing step subset of {1..total} including t=total."""
    if not 1 <= n_steps <= total:
        raise StepOutOfRange(f"cannot take {n_steps} DDIM steps from {total}")
    return [total - round(i * total / n_steps) for i in range(n_steps)]


def sample_ddpm(predict: PredictFn, shape: Tuple[int, ...], sched: NoiseSchedule,
                rng: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Ancestral sampling t = T..1; the final step adds no noise.

    Args:
        predict: (z_t, t) -> clean-latent estimate, guidance already applied.
        shape: latent shape, batch first.
        sched: noise schedule.
        rng: generator for the start noise and per-step noise.
    """
    z = torch.randn(shape, generator=rng, dtype=dtype)
    for t in range(sched.n_steps, 0, -1):
        z0_hat = predict(z, t)
        mean = posterior_mean(z0_hat, z, t, sched)
        if t > 1:
            noise = torch.randn(shape, generator=rng, dtype=dtype)
            z = mean + math.sqrt(posterior_variance(t, sched)) * noise
        else:
            z = mean
    return z


def sample_ddim(predict: PredictFn, shape: Tuple[int, ...], sched: NoiseSchedule,
                steps: int, eta: float = 0.0,
                rng: Optional[torch.Generator] = None,
                dtype=torch.float32) -> torch.Tensor:
    """DDIM on an evenly spaced step subset; deterministic at eta = 0.

    Args:
        predict: (z_t, t) -> clean-latent estimate, guidance already applied.
        shape: latent shape, batch first.
        sched: the full training schedule the subset indexes into.
        steps: number of sampling steps (the subset always contains t = T).
        eta: stochasticity knob; 0 is the deterministic sampler.
        rng: required when eta > 0 (and used for start noise when given).
    """
    if rng is None:
        if eta > 0:
            raise ValueError("eta > 0 needs an rng")
        z = torch.randn(shape, dtype=dtype)
    else:
        z = torch.randn(shape, generator=rng, dtype=dtype)
    schedule = ddim_steps(steps, sched.n_steps)
    for i, t in enumerate(schedule):
        t_prev = schedule[i + 1] if i + 1 < len(schedule) else 0
        ab_t = sched.alpha_bar(t)
        ab_prev = sched.alpha_bar(t_prev)
        z0_hat = predict(z, t)
        eps_hat = (z - math.sqrt(ab_t) * z0_hat) / math.sqrt(1.0 - ab_t)
        sigma = 0.0
        if eta > 0 and t_prev > 0:
            sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) \
                * math.sqrt(1.0 - ab_t / ab_prev)
        direction = math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
        z = math.sqrt(ab_prev) * z0_hat + direction
        if sigma > 0:
            z = z + sigma * torch.randn(shape, generator=rng, dtype=dtype)
    return z
