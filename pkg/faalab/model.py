"""
Model container: both unimodal encoders plus the fusion encoder and matching head.
"""

import copy
from dataclasses import dataclass
from typing import Dict, Literal

import numpy as np
from pydantic import BaseModel, Field, model_validator

from faalab import numerics as nx
from faalab.encoders import EncoderParams, encode, init_encoder
from faalab.errors import ShapeError
from faalab.fusion import FusionParams, init_fusion
from faalab.numerics import Tensor


class ArchConfig(BaseModel):
    """
    Network sizes. Defaults are desk scale; ``ArchConfig.full_scale()`` gives the
    published sizes (256-d shared space, 4 layers x 256 hidden x 4 heads).
    """

    embed_dim: int = Field(default=64, ge=2, description="Shared embedding width")
    encoder_hidden: int = Field(default=128, ge=1, description="Hidden width of each unimodal encoder")
    fusion_hidden: int = Field(default=64, ge=1, description="Fusion transformer width")
    fusion_layers: int = Field(default=2, ge=1, description="Number of transformer blocks")
    fusion_heads: int = Field(default=4, ge=1, description="Attention heads per block")
    ffn_mult: int = Field(default=4, ge=1, description="Feed-forward expansion factor")
    token_scheme: Literal["pair", "cls"] = Field(default="pair", description="Fusion input token scheme")
    zero_init_head: bool = Field(default=True, description="Start the matching head at zero (y_hat = 0.5)")
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0, description="Seeded dropout rate inside fusion blocks")
    layer_norm_eps: float = Field(default=1e-5, gt=0.0, description="Epsilon inside layer-norm square roots")

    @model_validator(mode="after")
    def validate_heads(self):
        if self.fusion_hidden % self.fusion_heads != 0:
            raise ValueError(
                f"fusion_hidden ({self.fusion_hidden}) must be divisible by fusion_heads ({self.fusion_heads})"
            )
        return self

    @classmethod
    def full_scale(cls) -> "ArchConfig":
        return cls(embed_dim=256, encoder_hidden=512, fusion_hidden=256, fusion_layers=4, fusion_heads=4)


@dataclass
class ModelParams:
    """All learnable parameters of the pipeline."""

    arch: ArchConfig
    face: EncoderParams
    voice: EncoderParams
    fusion: FusionParams

    def encoder(self, modality: str) -> EncoderParams:
        if modality == "face":
            return self.face
        if modality == "voice":
            return self.voice
        raise ShapeError(f"unknown modality '{modality}'")

    def encode(self, modality: str, batch: Tensor) -> Tensor:
        return encode(modality, batch, self.encoder(modality))

    def embed_numpy(self, modality: str, batch: np.ndarray) -> Tensor:
        """Encode a raw numpy batch outside any tape (evaluation / clustering)."""
        return self.encode(modality, nx.constant(batch))

    def named_parameters(self) -> Dict[str, Tensor]:
        """Every parameter tensor by canonical dotted name, in a fixed order."""
        named: Dict[str, Tensor] = {}
        named.update(self.face.named_parameters())
        named.update(self.voice.named_parameters())
        named.update(self.fusion.named_parameters())
        return named

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.named_parameters().values()]))

    def clone(self) -> "ModelParams":
        """Deep copy (used to keep the best-so-far model)."""
        return copy.deepcopy(self)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.named_parameters().values())

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """
        Overwrite parameter values from a name -> array mapping.

        Raises:
            ShapeError: If a name is missing or a shape differs
        """
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise ShapeError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, tensor in named.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeError(f"parameter {name}: expected shape {tensor.shape}, got {value.shape}")
            tensor.data[...] = value


def build_model(arch: ArchConfig, face_dim: int, voice_dim: int, seed: int) -> ModelParams:
    """
    Build freshly initialised parameters; identical seeds give identical parameters.
    """
    rng = np.random.default_rng([seed, 7])
    face = init_encoder("face", face_dim, arch.encoder_hidden, arch.embed_dim, rng)
    voice = init_encoder("voice", voice_dim, arch.encoder_hidden, arch.embed_dim, rng)
    fusion = init_fusion(
        embed_dim=arch.embed_dim,
        hidden=arch.fusion_hidden,
        layers=arch.fusion_layers,
        heads=arch.fusion_heads,
        rng=rng,
        token_scheme=arch.token_scheme,
        ffn_mult=arch.ffn_mult,
        zero_init_head=arch.zero_init_head,
        eps=arch.layer_norm_eps,
        dropout=arch.dropout,
    )
    return ModelParams(arch=arch, face=face, voice=voice, fusion=fusion)
