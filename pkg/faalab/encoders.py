"""
Unimodal encoders mapping raw face / voice vectors into the shared embedding space.

Each encoder is a two-layer perceptron (input -> hidden -> embed, GELU between)
followed by a square projection and row-wise L2 normalisation, so cosine
similarity between outputs equals their dot product.
"""

from dataclasses import dataclass
from typing import Dict

import numpy as np

from faalab import numerics as nx
from faalab.errors import ShapeError
from faalab.numerics import Tensor

MODALITIES = ("face", "voice")


@dataclass
class EncoderParams:
    """
    Weights of one modality encoder.

    Attributes:
        modality: "face" or "voice"
        w1, b1: input -> hidden
        w2, b2: hidden -> embed
        wp, bp: embed -> embed projection
    """

    modality: str
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    wp: Tensor
    bp: Tensor

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.wp.shape[1]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {
            f"{self.modality}.{key}": getattr(self, key)
            for key in ("w1", "b1", "w2", "b2", "wp", "bp")
        }


def init_encoder(modality: str, input_dim: int, hidden_dim: int, embed_dim: int,
                 rng: np.random.Generator) -> EncoderParams:
    """He-initialised weights, zero biases."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality '{modality}'")

    def weight(fan_in, fan_out, key):
        return nx.parameter(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in), f"{modality}.{key}")

    def zeros(n, key):
        return nx.parameter(np.zeros(n), f"{modality}.{key}")

    return EncoderParams(
        modality=modality,
        w1=weight(input_dim, hidden_dim, "w1"),
        b1=zeros(hidden_dim, "b1"),
        w2=weight(hidden_dim, embed_dim, "w2"),
        b2=zeros(embed_dim, "b2"),
        wp=weight(embed_dim, embed_dim, "wp"),
        bp=zeros(embed_dim, "bp"),
    )


def encode(modality: str, batch: Tensor, params: EncoderParams) -> Tensor:
    """
    Embed a batch of raw vectors.

    Args:
        modality: "face" or "voice"; must match the encoder
        batch: Tensor (b x modality_dim)
        params: Encoder weights for that modality

    Returns:
        Tensor (b x embed_dim) with unit-norm rows

    Raises:
        ShapeError: If the modality or input width does not match the encoder
    """
    if modality != params.modality:
        raise ShapeError(f"encode: {modality} batch given to the {params.modality} encoder")
    if batch.ndim != 2 or batch.shape[1] != params.input_dim:
        raise ShapeError(f"encode: {modality} batch has shape {batch.shape}, encoder expects width {params.input_dim}")
    hidden = nx.gelu(nx.add_bias(nx.matmul(batch, params.w1), params.b1))
    embed = nx.add_bias(nx.matmul(hidden, params.w2), params.b2)
    projected = nx.add_bias(nx.matmul(embed, params.wp), params.bp)
    return nx.l2_normalize_rows(projected)
