"""Hand perceptron: per-frame learnable queries cross-attending into a dense
vision feature grid, plus the pluggable feature-provider interface and the
synthetic provider used by the generated datasets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn

from .container import read_container, write_container
from .errors import ShapeMismatch
from .rope import RopeSplit, rope_3d


@dataclass(frozen=True)
class FeatureGrid:
    """Dense per-frame vision tokens of shape (N, h, w, d_v)."""

    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float32)
        if t.ndim != 4 or min(t.shape) < 1:
            raise ShapeMismatch(f"feature grid must be (N,h,w,d_v), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("feature grid must be finite")
        object.__setattr__(self, "tokens", t)

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    def save(self, path) -> None:
        write_container(path, "features", {}, {"tokens": self.tokens})

    @staticmethod
    def load(path) -> "FeatureGrid":
        kind, _, arrays = read_container(path)
        if kind != "features":
            raise ValueError(f"expected a features file, got kind {kind!r}")
        return FeatureGrid(arrays["tokens"])


class FeatureProvider(Protocol):
    """Anything that turns per-frame observations into a FeatureGrid.

    The synthetic provider consumes 2D keypoints; a real implementation would
    consume decoded video frames through a pretrained backbone.
    """

    def extract(self, kps2d: np.ndarray, visibility: np.ndarray) -> FeatureGrid: ...


def synthetic_feature_provider(kps2d: np.ndarray, visibility: np.ndarray,
                               h: int = 8, w: int = 8, d_v: int = 64,
                               seed: int = 0) -> FeatureGrid:
    """Deterministic stand-in for a frozen vision backbone.

    The first 21 channels hold one Gaussian heatmap per visible joint
    (occluded joints contribute nothing); remaining channels are seeded
    distractor noise independent of the keypoints, so an all-occluded frame
    equals the distractor-only baseline.

    Args:
        kps2d: (N, 21, 2) normalized keypoints.
        visibility: (N, 21) boolean/0-1 flags.
        h, w, d_v: grid dims and channel count (d_v > 21).
        seed: distractor stream seed.
    """
    kps = np.asarray(kps2d, dtype=np.float64)
    vis = np.asarray(visibility).astype(bool)
    if kps.ndim != 3 or kps.shape[1:] != (21, 2):
        raise ShapeMismatch(f"kps2d must be (N,21,2), got {kps.shape}")
    if vis.shape != kps.shape[:2]:
        raise ShapeMismatch(f"visibility must be (N,21), got {vis.shape}")
    if d_v <= 21:
        raise ValueError("d_v must exceed the 21 heatmap channels")
    n = kps.shape[0]

    rng = np.random.default_rng(seed)
    grid = np.zeros((n, h, w, d_v), dtype=np.float64)
    grid[..., 21:] = rng.normal(0.0, 0.3, size=(n, h, w, d_v - 21))

    # Cell centers in normalized image coords.
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    sigma = 1.0 / max(h, w)
    for i in range(n):
        for j in range(21):
            if not vis[i, j]:
                continue
            du = xs[None, :] - kps[i, j, 0]     # (1, w)
            dv = ys[:, None] - kps[i, j, 1]     # (h, 1)
            grid[i, :, :, j] = np.exp(-(du ** 2 + dv ** 2) / (2.0 * sigma ** 2))
    return FeatureGrid(grid.astype(np.float32))


@dataclass(frozen=True)
class SyntheticFeatureProvider:
    """FeatureProvider wrapper around :func:`synthetic_feature_provider`."""

    h: int = 8
    w: int = 8
    d_v: int = 64
    seed: int = 0

    def extract(self, kps2d: np.ndarray, visibility: np.ndarray) -> FeatureGrid:
        return synthetic_feature_provider(kps2d, visibility, self.h, self.w,
                                          self.d_v, self.seed)


class HandPerceptron(nn.Module):
    """One hand token per frame via cross-attention into the feature grid.

    Queries come from a trainable per-frame token bank plus the anchor token
    a1 added as a bias to every frame (anchoring attention to one hand
    instance). Queries rotate by their frame index on the temporal channel
    segment; keys rotate by their (t, h, w) grid coordinates.

    Args:
        d_model: output/token width.
        d_vision: grid channel count fed to W_K / W_V.
        n_heads: attention heads.
        max_frames: size of the query bank (upper bound on padded N).
        rope_base: rotary frequency base.
    """

    def __init__(self, d_model: int, d_vision: int, n_heads: int,
                 max_frames: int = 64, rope_base: float = 10000.0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.split = RopeSplit.for_head_dim(self.d_head)
        self.rope_base = rope_base
        self.hand_tokens = nn.Parameter(torch.randn(max_frames, d_model) * 0.02)
        self.q_proj = nn.Linear(d_model, d_model)
        self.a_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_vision, d_model)
        self.v_proj = nn.Linear(d_vision, d_model)
        self.q_norm = nn.LayerNorm(d_model)
        self.k_norm = nn.LayerNorm(d_model)
        self.v_norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, grid: torch.Tensor, a1: torch.Tensor,
                use_rope: bool = True) -> torch.Tensor:
        """Extract hand features.

        Args:
            grid: (B, N, h, w, d_v) feature tokens.
            a1: (B, d_model) anchor token.
            use_rope: disable to make attention order-blind (test hook).

        Returns:
            (B, N, d_model) hand tokens, one per frame.
        """
        if grid.ndim != 5:
            raise ShapeMismatch(f"grid must be (B,N,h,w,d_v), got {grid.shape}")
        b, n, h, w, _ = grid.shape
        if n > self.hand_tokens.shape[0]:
            raise ShapeMismatch(
                f"sequence length {n} exceeds hand-token bank {self.hand_tokens.shape[0]}")
        if a1.shape != (b, self.d_model):
            raise ShapeMismatch(f"a1 must be (B,{self.d_model}), got {tuple(a1.shape)}")

        queries = self.hand_tokens[:n][None] + self.a_proj(a1)[:, None, :]  # (B, N, d)
        q = self.q_norm(self.q_proj(queries))
        kv = grid.reshape(b, n * h * w, -1)
        k = self.k_norm(self.k_proj(kv))
        v = self.v_norm(self.v_proj(kv))

        q = q.reshape(b, n, self.n_heads, self.d_head).transpose(1, 2)
        k = k.reshape(b, n * h * w, self.n_heads, self.d_head).transpose(1, 2)
        v = v.reshape(b, n * h * w, self.n_heads, self.d_head).transpose(1, 2)

        if use_rope:
            dev = grid.device
            t_idx = torch.arange(n, device=dev)
            q_coords = torch.stack([t_idx, torch.zeros_like(t_idx),
                                    torch.zeros_like(t_idx)], dim=-1)
            kt = t_idx.repeat_interleave(h * w)
            kh = torch.arange(h, device=dev).repeat_interleave(w).repeat(n)
            kw = torch.arange(w, device=dev).repeat(n * h)
            k_coords = torch.stack([kt, kh, kw], dim=-1)
            # Queries carry only a temporal coordinate: rotating with
            # (t, 0, 0) matches the key-side temporal frequencies and leaves
            # the spatial segments untouched.
            q = rope_3d(q, q_coords, self.split, self.rope_base)
            k = rope_3d(k, k_coords, self.split, self.rope_base)

        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.d_head), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, self.d_model)
        return self.out(out)
