"""Joint VAE: motion encoder with distribution tokens, per-modality condition
encoders aligned into the same latent space, and the autoregressive
anchor-token decoder.

All sequence latents are per-frame (N, d); only the global token g is
stochastic, sampled by reparameterization from the two distribution-token
outputs of the motion encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import LengthNotMultiple, ShapeMismatch, UnknownKind
from .hand_model import POSE_DIM, HandPose, HandSkeleton, fk_tensor
from .transformer import RopeEncoder

CONDITION_KINDS = ("keypoints2d", "keypoints3d", "mano")
CONDITION_WIDTHS = {"keypoints2d": 42, "keypoints3d": 63, "mano": POSE_DIM}


@dataclass
class MotionSequence:
    """N flattened pose frames, (N, 61) float64."""

    params: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != POSE_DIM:
            raise ShapeMismatch(f"motion params must be (N,{POSE_DIM}), got {p.shape}")
        if p.shape[0] < 1:
            raise ShapeMismatch("motion needs at least one frame")
        if not np.all(np.isfinite(p)):
            raise ValueError("motion params must be finite")
        self.params = p

    @property
    def n_frames(self) -> int:
        return self.params.shape[0]

    def pose(self, i: int) -> HandPose:
        return HandPose.from_vector(self.params[i])

    @staticmethod
    def from_poses(poses) -> "MotionSequence":
        return MotionSequence(np.stack([p.to_vector() for p in poses]))


@dataclass
class ConditionSignal:
    """One structured condition stream plus its per-frame availability mask."""

    kind: str
    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise UnknownKind(f"unknown condition kind {self.kind!r}")
        data = np.asarray(self.data, dtype=np.float64)
        mask = np.asarray(self.mask).astype(bool).reshape(-1)
        expected = {"keypoints2d": (21, 2), "keypoints3d": (21, 3), "mano": (POSE_DIM,)}
        if data.shape[1:] != expected[self.kind]:
            raise ShapeMismatch(
                f"{self.kind} data must be (N,{expected[self.kind]}), got {data.shape}")
        if mask.shape[0] != data.shape[0]:
            raise ShapeMismatch("mask length must equal the frame count")
        self.data = data
        self.mask = mask

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def flat_data(self) -> np.ndarray:
        return self.data.reshape(self.n_frames, -1)


@dataclass
class GlobalToken:
    """Gaussian summary token: sample = mu + exp(log_sigma) * eps."""

    mu: torch.Tensor
    log_sigma: torch.Tensor
    sample: torch.Tensor
    eps: torch.Tensor


@dataclass(frozen=True)
class VaeLossWeights:
    w_kl: float = 1e-4
    w_joint_rec: float = 0.5
    w_latent: float = 0.1
    w_aux: float = 0.1

    def __post_init__(self):
        if min(self.w_kl, self.w_joint_rec, self.w_latent, self.w_aux) < 0:
            raise ValueError("loss weights must be non-negative")


def pad_frames(arr: np.ndarray, multiple: int) -> np.ndarray:
    """Pad axis 0 up to a multiple by repeating the final frame."""
    n = arr.shape[0]
    target = -(-n // multiple) * multiple
    if target == n:
        return arr.copy()
    tail = np.repeat(arr[-1:], target - n, axis=0)
    return np.concatenate([arr, tail], axis=0)


def pad_condition(signal: ConditionSignal, multiple: int) -> ConditionSignal:
    """Pad a condition stream by repeating its final frame (data and mask)."""
    return ConditionSignal(signal.kind,
                           pad_frames(signal.data, multiple),
                           pad_frames(signal.mask, multiple))


class JointVae(nn.Module):
    """Motion/condition encoders and the segment-rollout decoder.

    Args:
        cfg: architecture preset.
        conditions: condition kinds to build encoders for.
    """

    def __init__(self, cfg: ModelConfig, conditions: Tuple[str, ...] = CONDITION_KINDS):
        super().__init__()
        for kind in conditions:
            if kind not in CONDITION_KINDS:
                raise UnknownKind(f"unknown condition kind {kind!r}")
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Linear(POSE_DIM, d)
        self.t_mu = nn.Parameter(torch.randn(d) * 0.02)
        self.t_sigma = nn.Parameter(torch.randn(d) * 0.02)
        self.encoder = RopeEncoder(d, cfg.vae_layers, cfg.vae_heads, cfg.ff_dim,
                                   cfg.dropout, cfg.rope_base)
        self.cond_embed = nn.ModuleDict({
            kind: nn.Linear(CONDITION_WIDTHS[kind], d) for kind in conditions})
        self.cond_encoders = nn.ModuleDict({
            kind: RopeEncoder(d, cfg.vae_layers, cfg.vae_heads, cfg.ff_dim,
                              cfg.dropout, cfg.rope_base) for kind in conditions})
        self.missing_embed = nn.ParameterDict({
            kind: nn.Parameter(torch.randn(d) * 0.02) for kind in conditions})
        self.decoder = RopeEncoder(d, cfg.vae_layers, cfg.vae_heads, cfg.ff_dim,
                                   cfg.dropout, cfg.rope_base)
        self.anchor_linear = nn.Linear(POSE_DIM, d)
        self.out_head = nn.Linear(d, POSE_DIM)
        self.last_rollout_count = 0

    # -- encoding ---------------------------------------------------------

    def encode_motion(self, x: torch.Tensor, eps: Optional[torch.Tensor] = None,
                      sample: Optional[bool] = None) -> Tuple[torch.Tensor, GlobalToken]:
        """Encode pose frames to per-frame latents plus the global token.

        Args:
            x: (B, N, 61) flattened frames.
            eps: optional (B, d) reparameterization noise; drawn fresh when
                omitted and sampling is active. Recorded on the output.
            sample: force sampling on/off; defaults to self.training. When
                off, g collapses to mu exactly.

        Returns:
            (z, g) with z (B, N, d).
        """
        if x.ndim != 3 or x.shape[-1] != POSE_DIM:
            raise ShapeMismatch(f"motion batch must be (B,N,{POSE_DIM}), got {tuple(x.shape)}")
        b, n, _ = x.shape
        tokens = self.embed(x)
        specials = torch.stack([self.t_mu, self.t_sigma]).unsqueeze(0).expand(b, -1, -1)
        seq = torch.cat([specials, tokens], dim=1)
        positions = torch.cat([
            torch.zeros(2, device=x.device),
            torch.arange(1, n + 1, device=x.device)])
        out = self.encoder(seq, positions)
        mu, log_sigma = out[:, 0], out[:, 1]
        z = out[:, 2:]
        if sample is None:
            sample = self.training
        if sample:
            if eps is None:
                eps = torch.randn_like(mu)
            g = mu + torch.exp(log_sigma) * eps
        else:
            eps = torch.zeros_like(mu)
            g = mu
        return z, GlobalToken(mu, log_sigma, g, eps)

    def encode_condition_tensors(self, kind: str, data: torch.Tensor,
                                 mask: torch.Tensor) -> torch.Tensor:
        """Encode one condition stream.

        Masked frames are replaced by the kind's learned missing-frame
        embedding before the transformer, so unavailable payloads never leak
        into any output token.

        Args:
            kind: condition kind.
            data: (B, N, width) flattened condition values.
            mask: (B, N) availability flags.

        Returns:
            (B, N, d) latents.
        """
        if kind not in self.cond_embed:
            raise UnknownKind(f"no encoder for condition kind {kind!r}")
        width = CONDITION_WIDTHS[kind]
        if data.ndim != 3 or data.shape[-1] != width:
            raise ShapeMismatch(f"{kind} batch must be (B,N,{width}), got {tuple(data.shape)}")
        tokens = self.cond_embed[kind](data)
        missing = self.missing_embed[kind].to(tokens.dtype)
        tokens = torch.where(mask.bool()[..., None], tokens, missing)
        positions = torch.arange(1, data.shape[1] + 1, device=data.device)
        return self.cond_encoders[kind](tokens, positions)

    def encode_condition(self, signal: ConditionSignal) -> torch.Tensor:
        """ConditionSignal convenience wrapper (batch of one, squeezed)."""
        p = self.embed.weight
        data = torch.as_tensor(signal.flat_data(), dtype=p.dtype, device=p.device)[None]
        mask = torch.as_tensor(signal.mask, device=p.device)[None]
        return self.encode_condition_tensors(signal.kind, data, mask)[0]

    # -- decoding ---------------------------------------------------------

    def decode(self, z: torch.Tensor, g: torch.Tensor,
               first_frame: torch.Tensor) -> torch.Tensor:
        """Autoregressive rollout in segments of ``cfg.segment_len`` frames.

        Each segment sees (anchor, g, z-segment); the anchor for the next
        segment is the linear embedding of the last reconstructed frame, so
        segment k never depends on z tokens of later segments.

        Args:
            z: (B, N, d) latents, N divisible by the segment length.
            g: (B, d) global token.
            first_frame: (B, 61) pose supplying the initial anchor.

        Returns:
            (B, N, 61) reconstructed frames.
        """
        b, n, d = z.shape
        seg = self.cfg.segment_len
        if n % seg != 0:
            raise LengthNotMultiple(f"N = {n} is not a multiple of segment length {seg}")
        if first_frame.shape != (b, POSE_DIM):
            raise ShapeMismatch(f"first_frame must be (B,{POSE_DIM}), got {tuple(first_frame.shape)}")
        positions = torch.cat([
            torch.zeros(2, device=z.device),
            torch.arange(1, seg + 1, device=z.device)])
        anchor = self.anchor_linear(first_frame)
        chunks = []
        for start in range(0, n, seg):
            seq = torch.cat([anchor[:, None], g[:, None], z[:, start:start + seg]], dim=1)
            out = self.decoder(seq, positions)
            frames = self.out_head(out[:, 2:])
            chunks.append(frames)
            anchor = self.anchor_linear(frames[:, -1])
        self.last_rollout_count = n // seg
        return torch.cat(chunks, dim=1)

    def decode_autoregressive(self, z: torch.Tensor, g: GlobalToken,
                              first_frame: HandPose) -> MotionSequence:
        """Single-sequence wrapper over :meth:`decode`."""
        p = self.embed.weight
        zz = z[None] if z.ndim == 2 else z
        gg = g.sample[None] if g.sample.ndim == 1 else g.sample
        ff = torch.as_tensor(first_frame.to_vector(), dtype=p.dtype, device=p.device)[None]
        x_hat = self.decode(zz.to(p.dtype), gg.to(p.dtype), ff)
        return MotionSequence(x_hat[0].detach().double().numpy())


# -- losses ---------------------------------------------------------------


def smooth_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean smooth-L1 with transition point 1.0 in parameter units."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.smooth_l1_loss(a, b, beta=1.0)


def kl_standard_normal(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma) || N(0, I)), summed over dims, averaged over batch."""
    term = mu.pow(2) + torch.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma
    return 0.5 * term.sum(dim=-1).mean()


def rec_loss(x_hat: torch.Tensor, x: torch.Tensor, w_joint_rec: float,
             skel: Optional[HandSkeleton] = None) -> torch.Tensor:
    """Parameter smooth-L1 plus weighted FK-joint smooth-L1."""
    loss = smooth_l1(x_hat, x)
    if w_joint_rec != 0.0:
        loss = loss + w_joint_rec * smooth_l1(fk_tensor(x_hat, skel), fk_tensor(x, skel))
    return loss


def vae_loss(x: torch.Tensor, x_hat: torch.Tensor,
             x_hat_c: Dict[str, torch.Tensor],
             z: torch.Tensor, z_c: Dict[str, torch.Tensor],
             g: GlobalToken, weights: VaeLossWeights,
             skel: Optional[HandSkeleton] = None) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Composed training loss.

    total = L_rec + w_kl * L_KL + w_latent * sum_c MSE(z_c, z)
          + w_aux * sum_c SmoothL1(x_hat_c, x)

    Returns:
        (total, components) where components holds detached floats.
    """
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"x/x_hat shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    l_rec = rec_loss(x_hat, x, weights.w_joint_rec, skel)
    l_kl = kl_standard_normal(g.mu, g.log_sigma)
    zero = torch.zeros((), dtype=x.dtype, device=x.device)
    l_latent = zero
    for kind, zc in z_c.items():
        if zc.shape != z.shape:
            raise ShapeMismatch(f"z_c[{kind}] shape {tuple(zc.shape)} != z {tuple(z.shape)}")
        l_latent = l_latent + F.mse_loss(zc, z)
    l_aux = zero
    for kind, xc in x_hat_c.items():
        l_aux = l_aux + smooth_l1(xc, x)
    total = l_rec + weights.w_kl * l_kl + weights.w_latent * l_latent + weights.w_aux * l_aux
    parts = {"rec": float(l_rec.detach()), "kl": float(l_kl.detach()),
             "latent": float(l_latent.detach()), "aux": float(l_aux.detach())}
    return total, parts
