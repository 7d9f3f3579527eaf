"""Rotary positional encodings: plain 1D and the (t, h, w)-split 3D variant."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import OddDimension, SplitMismatch

DEFAULT_BASE = 10000.0


@dataclass(frozen=True)
class RopeSplit:
    """Channel split of one attention head across temporal/height/width axes."""

    d_t: int
    d_h: int
    d_w: int

    def __post_init__(self):
        for name in ("d_t", "d_h", "d_w"):
            v = getattr(self, name)
            if v <= 0 or v % 2 != 0:
                raise OddDimension(f"{name} must be even and positive, got {v}")

    @property
    def total(self) -> int:
        return self.d_t + self.d_h + self.d_w

    @staticmethod
    def for_head_dim(d_head: int) -> "RopeSplit":
        """Default split (d/2, d/4, d/4); temporal axis gets the largest share."""
        if d_head % 8 != 0:
            raise SplitMismatch(f"head dim {d_head} not divisible by 8")
        return RopeSplit(d_head // 2, d_head // 4, d_head // 4)


def _pair_angles(positions: torch.Tensor, dim: int, base: float) -> torch.Tensor:
    """Rotation angle per (position, channel pair): m * base^(-2i/dim)."""
    half = dim // 2
    exponent = -torch.arange(half, dtype=positions.dtype, device=positions.device) * 2.0 / dim
    freqs = torch.pow(torch.as_tensor(base, dtype=positions.dtype, device=positions.device),
                      exponent)                                  # (dim/2,)
    return positions[..., None] * freqs                          # (..., K, dim/2)


# Short 1D position vectors recur every step (sequence and segment layouts),
# so their cos/sin tables are memoized by value.
_ANGLE_CACHE: dict = {}
_ANGLE_CACHE_LIMIT = 512
_CACHEABLE_LEN = 128


def _cos_sin(positions: torch.Tensor, dim: int, base: float):
    cacheable = positions.ndim == 1 and positions.numel() <= _CACHEABLE_LEN
    if cacheable:
        key = (dim, float(base), str(positions.dtype), tuple(positions.tolist()))
        hit = _ANGLE_CACHE.get(key)
        if hit is not None:
            return hit
    angles = _pair_angles(positions, dim, base)
    pair = (torch.cos(angles), torch.sin(angles))
    if cacheable:
        if len(_ANGLE_CACHE) >= _ANGLE_CACHE_LIMIT:
            _ANGLE_CACHE.clear()
        _ANGLE_CACHE[key] = pair
    return pair


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved channel pairs (x0,x1) by cached cos/sin tables."""
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_1d(x: torch.Tensor, positions: torch.Tensor, base: float = DEFAULT_BASE) -> torch.Tensor:
    """Rotate token channels by their sequence position.

    Args:
        x: (..., K, d) tokens, d even.
        positions: (K,) or broadcastable (..., K) positions.
        base: frequency base.

    Returns:
        Rotated tokens, same shape; norm-preserving per token.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise OddDimension(f"rope_1d needs an even channel count, got {d}")
    positions = torch.as_tensor(positions, dtype=x.dtype, device=x.device)
    cos, sin = _cos_sin(positions, d, base)
    return _rotate(x, cos, sin)


def rope_3d(x: torch.Tensor, coords: torch.Tensor, split: RopeSplit,
            base: float = DEFAULT_BASE) -> torch.Tensor:
    """Rotate channel segments by temporal / height / width coordinates.

    Channels [0,d_t) rotate with the t coordinate, [d_t,d_t+d_h) with h, the
    rest with w; each segment uses its own frequency table so the degenerate
    h = w = 1 grid reduces to rope_1d on the temporal segment.

    Args:
        x: (..., K, d) tokens with d == split.total.
        coords: (K, 3) or (..., K, 3) integer (t, h, w) coordinates.
        split: channel split.

    Returns:
        Rotated tokens, same shape.
    """
    d = x.shape[-1]
    if split.total != d:
        raise SplitMismatch(f"split {split} does not sum to channel count {d}")
    coords = torch.as_tensor(coords, dtype=x.dtype, device=x.device)
    if coords.shape[-1] != 3:
        raise SplitMismatch(f"coords need a trailing dim of 3, got {coords.shape}")
    pieces = []
    start = 0
    for seg_dim, axis in ((split.d_t, 0), (split.d_h, 1), (split.d_w, 2)):
        seg = x[..., start:start + seg_dim]
        cos, sin = _cos_sin(coords[..., axis], seg_dim, base)
        pieces.append(_rotate(seg, cos, sin))
        start += seg_dim
    return torch.cat(pieces, dim=-1)
