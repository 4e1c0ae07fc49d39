"""
Fusion encoder: a small pre-norm transformer over the (face, voice) embedding
pair, pooled into a joint representation, with a two-way matching head.

Token schemes:
    pair - tokens [proj(face) + type_f, proj(voice) + type_v], mean-pooled
    cls  - a learned CLS token prepended; its output is the joint representation
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from faalab import numerics as nx
from faalab.errors import ShapeError
from faalab.numerics import Tensor

logger = logging.getLogger(__name__)

TOKEN_SCHEMES = ("pair", "cls")
_LAYER_KEYS = (
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
)


@dataclass
class FusionLayer:
    """One pre-norm block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    tensors: Dict[str, Tensor]

    def __getattr__(self, key):
        try:
            return self.__dict__["tensors"][key]
        except KeyError:
            raise AttributeError(key)


@dataclass
class FusionParams:
    """
    Fusion transformer and matching head.

    Attributes:
        heads: Number of attention heads (hidden must be divisible by it)
        token_scheme: "pair" or "cls"
        tok_w, tok_b: shared token projection embed -> hidden
        type_f, type_v: modality-type vectors
        cls: CLS token (only used by the "cls" scheme)
        layers: Transformer blocks
        lnf_g, lnf_b: final layer norm
        head_w, head_b: hidden -> 2 matching head
    """

    heads: int
    token_scheme: str
    tok_w: Tensor
    tok_b: Tensor
    type_f: Tensor
    type_v: Tensor
    cls: Tensor
    layers: List[FusionLayer]
    lnf_g: Tensor
    lnf_b: Tensor
    head_w: Tensor
    head_b: Tensor
    eps: float = 1e-5
    dropout: float = 0.0

    @property
    def hidden(self) -> int:
        return self.tok_w.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.tok_w.shape[0]

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {
            "fusion.tok_w": self.tok_w,
            "fusion.tok_b": self.tok_b,
            "fusion.type_f": self.type_f,
            "fusion.type_v": self.type_v,
        }
        if self.token_scheme == "cls":
            named["fusion.cls"] = self.cls
        for i, layer in enumerate(self.layers):
            for key in _LAYER_KEYS:
                named[f"fusion.layers.{i}.{key}"] = layer.tensors[key]
        named.update({
            "fusion.lnf_g": self.lnf_g,
            "fusion.lnf_b": self.lnf_b,
            "fusion.head_w": self.head_w,
            "fusion.head_b": self.head_b,
        })
        return named


def init_fusion(embed_dim: int, hidden: int, layers: int, heads: int, rng: np.random.Generator,
                token_scheme: str = "pair", ffn_mult: int = 4, zero_init_head: bool = True,
                eps: float = 1e-5, dropout: float = 0.0) -> FusionParams:
    """
    Initialise fusion parameters (Xavier-style weights, unit LN gains, zero biases).

    Raises:
        ShapeError: If hidden is not divisible by heads
        ValueError: If token_scheme is unknown
    """
    if hidden % heads != 0:
        raise ShapeError(f"fusion hidden size {hidden} is not divisible by {heads} heads")
    if token_scheme not in TOKEN_SCHEMES:
        raise ValueError(f"unknown token scheme '{token_scheme}'")

    def weight(fan_in, fan_out, name):
        return nx.parameter(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in), name)

    def vector(n, name, value=0.0):
        return nx.parameter(np.full(n, value), name)

    def small(n, name):
        return nx.parameter(rng.standard_normal(n) * 0.02, name)

    blocks = []
    ffn = hidden * ffn_mult
    for i in range(layers):
        p = f"fusion.layers.{i}."
        blocks.append(FusionLayer({
            "ln1_g": vector(hidden, p + "ln1_g", 1.0), "ln1_b": vector(hidden, p + "ln1_b"),
            "wq": weight(hidden, hidden, p + "wq"), "bq": vector(hidden, p + "bq"),
            "wk": weight(hidden, hidden, p + "wk"), "bk": vector(hidden, p + "bk"),
            "wv": weight(hidden, hidden, p + "wv"), "bv": vector(hidden, p + "bv"),
            "wo": weight(hidden, hidden, p + "wo"), "bo": vector(hidden, p + "bo"),
            "ln2_g": vector(hidden, p + "ln2_g", 1.0), "ln2_b": vector(hidden, p + "ln2_b"),
            "ff1_w": weight(hidden, ffn, p + "ff1_w"), "ff1_b": vector(ffn, p + "ff1_b"),
            "ff2_w": weight(ffn, hidden, p + "ff2_w"), "ff2_b": vector(hidden, p + "ff2_b"),
        }))

    if zero_init_head:
        head_w = nx.parameter(np.zeros((hidden, 2)), "fusion.head_w")
    else:
        head_w = weight(hidden, 2, "fusion.head_w")

    return FusionParams(
        heads=heads,
        token_scheme=token_scheme,
        tok_w=weight(embed_dim, hidden, "fusion.tok_w"),
        tok_b=vector(hidden, "fusion.tok_b"),
        type_f=small(hidden, "fusion.type_f"),
        type_v=small(hidden, "fusion.type_v"),
        cls=small(hidden, "fusion.cls"),
        layers=blocks,
        lnf_g=vector(hidden, "fusion.lnf_g", 1.0),
        lnf_b=vector(hidden, "fusion.lnf_b"),
        head_w=head_w,
        head_b=vector(2, "fusion.head_b"),
        eps=eps,
        dropout=dropout,
    )


def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nx.mul(x, nx.constant(keep))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return nx.add_bias(nx.matmul(x, w), b)


def _self_attention(x: Tensor, layer: FusionLayer, heads: int) -> Tensor:
    b, t, h = x.shape
    dh = h // heads
    flat = nx.reshape(x, (b * t, h))

    def split(w, bias):
        y = nx.reshape(_linear(flat, w, bias), (b, t, heads, dh))
        return nx.reshape(nx.transpose(y, (0, 2, 1, 3)), (b * heads, t, dh))

    q = split(layer.wq, layer.bq)
    k = split(layer.wk, layer.bk)
    v = split(layer.wv, layer.bv)
    scores = nx.scale(nx.bmm(q, nx.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    context = nx.bmm(nx.softmax_rows(scores), v)
    merged = nx.reshape(nx.transpose(nx.reshape(context, (b, heads, t, dh)), (0, 2, 1, 3)), (b * t, h))
    return nx.reshape(_linear(merged, layer.wo, layer.bo), (b, t, h))


def _feed_forward(x: Tensor, layer: FusionLayer) -> Tensor:
    b, t, h = x.shape
    flat = nx.reshape(x, (b * t, h))
    out = _linear(nx.gelu(_linear(flat, layer.ff1_w, layer.ff1_b)), layer.ff2_w, layer.ff2_b)
    return nx.reshape(out, (b, t, h))


def _tokens(face: Tensor, voice: Tensor, params: FusionParams) -> Tensor:
    b = face.shape[0]
    h = params.hidden
    face_tok = nx.add_bias(_linear(face, params.tok_w, params.tok_b), params.type_f)
    voice_tok = nx.add_bias(_linear(voice, params.tok_w, params.tok_b), params.type_v)
    parts = [nx.reshape(face_tok, (b, 1, h)), nx.reshape(voice_tok, (b, 1, h))]
    if params.token_scheme == "cls":
        cls = nx.take(nx.reshape(params.cls, (1, h)), [0] * b, axis=0)
        parts.insert(0, nx.reshape(cls, (b, 1, h)))
    return nx.concat(parts, axis=1)


def joint_representations(face_embs: Tensor, voice_embs: Tensor, params: FusionParams,
                          rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Joint representation of b (face, voice) pairs.

    Args:
        face_embs: Tensor (b x embed_dim), unit-norm rows from the face encoder
        voice_embs: Tensor (b x embed_dim), unit-norm rows from the voice encoder
        params: Fusion parameters
        rng: Dropout generator; None disables dropout (inference)

    Returns:
        Tensor (b x hidden)

    Raises:
        ShapeError: If the pair batches disagree with each other or the token projection
    """
    if face_embs.ndim != 2 or face_embs.shape != voice_embs.shape or face_embs.shape[1] != params.embed_dim:
        raise ShapeError(
            f"fusion: face {face_embs.shape} / voice {voice_embs.shape} do not match embed width {params.embed_dim}"
        )
    x = _tokens(face_embs, voice_embs, params)
    for layer in params.layers:
        x = nx.add(x, _dropout(_self_attention(nx.layer_norm(x, layer.ln1_g, layer.ln1_b, params.eps),
                                               layer, params.heads), params.dropout, rng))
        x = nx.add(x, _dropout(_feed_forward(nx.layer_norm(x, layer.ln2_g, layer.ln2_b, params.eps), layer),
                               params.dropout, rng))
    x = nx.layer_norm(x, params.lnf_g, params.lnf_b, params.eps)
    b, t, h = x.shape
    if params.token_scheme == "cls":
        return nx.reshape(nx.take(x, [0], axis=1), (b, h))
    return nx.mean(x, axis=1)


def joint_representation(face_emb: Tensor, voice_emb: Tensor, params: FusionParams) -> Tensor:
    """Joint representation of a single pair; accepts 1-D embeddings and returns a (hidden,) vector."""
    face = nx.reshape(face_emb, (1, face_emb.size))
    voice = nx.reshape(voice_emb, (1, voice_emb.size))
    return nx.reshape(joint_representations(face, voice, params), (params.hidden,))


def match_probabilities(face_embs: Tensor, voice_embs: Tensor, params: FusionParams,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
    """Softmax over the two-way head for b pairs; column 1 is the positive class."""
    joint = joint_representations(face_embs, voice_embs, params, rng)
    return nx.softmax_rows(_linear(joint, params.head_w, params.head_b))


def match_scores(face_embs: Tensor, voice_embs: Tensor, params: FusionParams,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Positive-class probability y_hat for b pairs, as a (b,) tensor."""
    probs = match_probabilities(face_embs, voice_embs, params, rng)
    return nx.reshape(nx.take(probs, [1], axis=1), (probs.shape[0],))


def match_score(face_emb: Tensor, voice_emb: Tensor, params: FusionParams) -> float:
    """Positive-class probability of one (face, voice) pair."""
    face = nx.reshape(face_emb, (1, face_emb.size))
    voice = nx.reshape(voice_emb, (1, voice_emb.size))
    return match_scores(face, voice, params).item()


def cosine_scores(face_embs: Tensor, voice_embs: Tensor) -> np.ndarray:
    """Row-wise cosine of paired unit-norm embeddings (the fusion-off scorer)."""
    if face_embs.shape != voice_embs.shape:
        raise ShapeError(f"cosine_scores: {face_embs.shape} vs {voice_embs.shape}")
    return np.clip((face_embs.data * voice_embs.data).sum(axis=1), -1.0, 1.0)
