"""Model size presets: the full-scale architecture and a desk-scale variant."""

from __future__ import annotations

from dataclasses import dataclass, asdict


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by the VAE and the denoiser.

    Defaults are the full-scale settings: 512-wide transformers, 9 encoder /
    decoder layers with 8 heads on the VAE side, 16 layers with 16 heads in
    the denoiser, FF width 2048, dropout 0.1, GELU activations, sequences
    decoded in segments of 8 frames.
    """

    d_model: int = 512
    vae_layers: int = 9
    vae_heads: int = 8
    denoiser_layers: int = 16
    denoiser_heads: int = 16
    ff_dim: int = 2048
    dropout: float = 0.1
    segment_len: int = 8
    rope_base: float = 10000.0
    diffusion_steps: int = 50
    # Vision feature grid and the perceptron reading it.
    grid_h: int = 8
    grid_w: int = 8
    vision_dim: int = 64
    perceptron_heads: int = 8
    # Upper bound on padded sequence length (sizes the hand-token bank).
    max_frames: int = 64

    def __post_init__(self):
        for heads in (self.vae_heads, self.denoiser_heads, self.perceptron_heads):
            if self.d_model % heads != 0:
                raise ValueError(f"d_model {self.d_model} not divisible by {heads} heads")
            if (self.d_model // heads) % 8 != 0:
                # Head dim must split into even (1/2, 1/4, 1/4) rotary segments.
                raise ValueError("per-head dim must be a multiple of 8")
        if self.segment_len < 1:
            raise ValueError("segment_len must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def paper_config() -> ModelConfig:
    """Full-scale preset."""
    return ModelConfig()


def desk_config() -> ModelConfig:
    """Tiny preset for tests and CPU end-to-end runs: 2 layers, width 64.

    Dropout is off; at this scale it only slows convergence in the short
    training budgets the test suite uses.
    """
    return ModelConfig(
        d_model=64,
        vae_layers=2,
        vae_heads=4,
        denoiser_layers=2,
        denoiser_heads=4,
        ff_dim=128,
        dropout=0.0,
        perceptron_heads=4,
    )


PRESETS = {"paper": paper_config, "desk": desk_config}


def preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()
