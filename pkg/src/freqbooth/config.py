"""Model/geometry configuration shared by the encoder, denoiser, and trainer."""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32        # square RGB input
    patch: int = 4              # codec + tokenizer patch edge; latent downsample factor
    latent_channels: int = 4
    latent_scale: float = 1.0   # symmetric gain on the orthogonal codec
    d_model: int = 32
    n_blocks: int = 2
    d_ff: int = 32
    d_time: int = 8             # sinusoidal timestep feature dim
    n_text: int = 4             # text/context classes; one extra null row is reserved
    d_tok: int = 16             # patch token embedding dim
    d_query: int = 16           # identity pooler query/key dim
    d_id: int = 16              # identity feature dim
    n_query: int = 8            # identity tokens emitted by the pooler
    heads: int = 1
    timesteps: int = 200

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch {self.patch}"
            )
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    @property
    def latent_hw(self) -> int:
        return self.image_size // self.patch

    @property
    def seq(self) -> int:
        return self.latent_hw * self.latent_hw

    @property
    def null_text_id(self) -> int:
        return self.n_text

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale default: 32x32 images, 8x8 latents, 200-step schedule."""
    return replace(ModelConfig(), **overrides) if overrides else ModelConfig()


def paper_scale_config(**overrides) -> ModelConfig:
    """Full-resolution preset (512x512, factor-8 latents, 1000 steps).

    Kept as a configuration surface only; nothing at this scale is trained
    or sampled in the test suite.
    """
    cfg = ModelConfig(image_size=512, patch=8, d_model=64, n_blocks=4, d_ff=64,
                      timesteps=1000)
    return replace(cfg, **overrides) if overrides else cfg


def tiny_config(**overrides) -> ModelConfig:
    """Gradient-check preset: every matrix dimension is <= 8."""
    cfg = ModelConfig(image_size=8, patch=4, d_model=8, d_ff=6, d_time=4,
                      n_text=2, d_tok=8, d_query=4, d_id=4, n_query=2,
                      n_blocks=2, timesteps=50)
    return replace(cfg, **overrides) if overrides else cfg


PRESETS = {"toy": toy_config, "paper-scale": paper_scale_config, "tiny": tiny_config}
