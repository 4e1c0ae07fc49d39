"""
Loss mathematics for the metric-learning step.

- Pair mining over the in-batch cosine matrix
- Multi-similarity loss on mined pairs (and a brute-force reference)
- Contrastive loss (ablation baseline)
- Global hard / random negative mining for the matching head
- Matching cross-entropy and the combined objective
"""

import logging
from dataclasses import dataclass
from typing import List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from faalab import numerics as nx
from faalab.errors import ConfigError, DegenerateInputError, ShapeError
from faalab.numerics import Tensor

logger = logging.getLogger(__name__)

CE_CLAMP = 1e-12
CONTRASTIVE_MARGIN = 0.5

ArrayOrTensor = Union[np.ndarray, Tensor]


class MiningConfig(BaseModel):
    """Multi-similarity hyper-parameters and the positive-mining rule."""

    model_config = ConfigDict(populate_by_name=True)

    epsilon: float = Field(default=0.1, ge=0.0, description="Mining margin")
    alpha: float = Field(default=2.0, gt=0.0, description="Positive-pair scale")
    beta: float = Field(default=40.0, gt=0.0, description="Negative-pair scale")
    lambda_: float = Field(default=1.0, alias="lambda", description="Similarity offset inside the exponentials")
    rule: Literal["as_paper", "ms_original"] = Field(
        default="ms_original",
        description="Positive threshold: hardest negative (ms_original) or easiest negative (as_paper)",
    )
    mining: bool = Field(default=True, description="Apply pair mining before the loss sums")


@dataclass
class PairSelection:
    """
    Per-anchor selected pairs as boolean masks over the batch.

    Attributes:
        positives: (n x n) mask, positives[i, j] -> j is a selected positive of anchor i
        negatives: (n x n) mask, negatives[i, j] -> j is a selected negative of anchor i
    """

    positives: np.ndarray
    negatives: np.ndarray

    def positives_of(self, anchor: int) -> List[int]:
        return np.flatnonzero(self.positives[anchor]).tolist()

    def negatives_of(self, anchor: int) -> List[int]:
        return np.flatnonzero(self.negatives[anchor]).tolist()

    @property
    def is_empty(self) -> bool:
        return not (self.positives.any() or self.negatives.any())

    @property
    def num_pairs(self) -> int:
        return int(self.positives.sum() + self.negatives.sum())


@dataclass
class MatchBatch:
    """(face, voice, target) triples by index into the batch's face and voice rows."""

    face_idx: np.ndarray
    voice_idx: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def num_positive(self) -> int:
        return int(self.targets.sum())

    @property
    def usable(self) -> bool:
        return 0 < self.num_positive < len(self.targets)


def _as_array(x: ArrayOrTensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x: Union[ArrayOrTensor, float]) -> Tensor:
    return x if isinstance(x, Tensor) else nx.constant(x)


def _label_masks(labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    return pos, ~same


# ---------------------------------------------------------------------------
# Pair mining and the multi-similarity loss
# ---------------------------------------------------------------------------

def mine_pairs(sims: ArrayOrTensor, labels: Sequence[int], config: MiningConfig) -> PairSelection:
    """
    Select informative pairs per anchor.

    A negative j is kept when S_ij > (hardest positive of i) - epsilon. A
    positive j is kept when S_ij < threshold + epsilon, where the threshold is
    the hardest negative under ``ms_original`` and the easiest negative under
    ``as_paper``. Anchors without positives or without negatives select
    nothing. The diagonal never participates.

    Raises:
        ShapeError: If ``labels`` does not match the matrix size
    """
    s = _as_array(sims)
    labels = np.asarray(labels)
    n = len(labels)
    if s.shape != (n, n):
        raise ShapeError(f"mine_pairs: similarity matrix {s.shape} does not match {n} labels")
    pos_set, neg_set = _label_masks(labels)
    if not config.mining:
        return PairSelection(positives=pos_set, negatives=neg_set)

    valid = (pos_set.any(axis=1) & neg_set.any(axis=1))[:, None]
    min_pos = np.where(pos_set, s, np.inf).min(axis=1, initial=np.inf)
    if config.rule == "ms_original":
        pos_threshold = np.where(neg_set, s, -np.inf).max(axis=1, initial=-np.inf)
    else:
        pos_threshold = np.where(neg_set, s, np.inf).min(axis=1, initial=np.inf)

    negatives = neg_set & valid & (s > (min_pos - config.epsilon)[:, None])
    positives = pos_set & valid & (s < (pos_threshold + config.epsilon)[:, None])
    return PairSelection(positives=positives, negatives=negatives)


def ms_loss_from_similarities(sims: Tensor, selection: PairSelection, config: MiningConfig) -> Tensor:
    """Multi-similarity loss on an already-mined selection; differentiable w.r.t. ``sims``."""
    n = sims.shape[0]
    pos_mask = nx.constant(selection.positives.astype(np.float64))
    neg_mask = nx.constant(selection.negatives.astype(np.float64))
    lam = config.lambda_
    pos_terms = nx.mul(pos_mask, nx.exp(nx.scale(nx.add_scalar(sims, -lam), -config.alpha)))
    neg_terms = nx.mul(neg_mask, nx.exp(nx.scale(nx.add_scalar(sims, -lam), config.beta)))
    per_anchor = nx.add(
        nx.scale(nx.log1p(nx.sum(pos_terms, axis=1)), 1.0 / config.alpha),
        nx.scale(nx.log1p(nx.sum(neg_terms, axis=1)), 1.0 / config.beta),
    )
    return nx.scale(nx.sum(per_anchor), 1.0 / n)


def ms_loss(embeddings: Tensor, labels: Sequence[int], config: MiningConfig) -> Tensor:
    """
    Multi-similarity loss over a batch of embeddings (faces and voices stacked).

    Returns:
        Scalar tensor, zero when every selection is empty

    Raises:
        ShapeError: If the batch has fewer than 2 rows or labels mismatch
    """
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise ShapeError(f"ms_loss needs at least 2 embeddings, got shape {embeddings.shape}")
    if len(labels) != embeddings.shape[0]:
        raise ShapeError(f"ms_loss: {len(labels)} labels for {embeddings.shape[0]} embeddings")
    sims = nx.cosine_similarity_matrix(embeddings, embeddings)
    selection = mine_pairs(sims, labels, config)
    return ms_loss_from_similarities(sims, selection, config)


def ms_loss_reference(embeddings: np.ndarray, labels: Sequence[int], config: MiningConfig) -> float:
    """Plain double-loop evaluation of the mined multi-similarity loss."""
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    n = len(e)
    total = 0.0
    for i in range(n):
        sims = [float(np.dot(e[i], e[j])) for j in range(n)]
        pos = [sims[j] for j in range(n) if j != i and labels[j] == labels[i]]
        neg = [sims[j] for j in range(n) if labels[j] != labels[i]]
        if config.mining:
            if not pos or not neg:
                continue
            threshold = max(neg) if config.rule == "ms_original" else min(neg)
            hardest_pos = min(pos)
            pos = [p for p in pos if p < threshold + config.epsilon]
            neg = [q for q in neg if q > hardest_pos - config.epsilon]
        pos_sum = sum(np.exp(-config.alpha * (p - config.lambda_)) for p in pos)
        neg_sum = sum(np.exp(config.beta * (q - config.lambda_)) for q in neg)
        total += np.log1p(pos_sum) / config.alpha + np.log1p(neg_sum) / config.beta
    return total / n


def contrastive_loss(embeddings: Tensor, labels: Sequence[int], margin: float = CONTRASTIVE_MARGIN) -> Tensor:
    """
    Pairwise cosine contrastive loss: mean (1 - S) over positive pairs plus
    mean max(0, S - margin) over negative pairs.
    """
    if len(labels) != embeddings.shape[0]:
        raise ShapeError(f"contrastive_loss: {len(labels)} labels for {embeddings.shape[0]} embeddings")
    sims = nx.cosine_similarity_matrix(embeddings, embeddings)
    pos_set, neg_set = _label_masks(np.asarray(labels))
    pos_term = nx.sum(nx.mul(nx.constant(pos_set.astype(np.float64)), nx.add_scalar(nx.neg(sims), 1.0)))
    neg_term = nx.sum(nx.mul(nx.constant(neg_set.astype(np.float64)), nx.relu(nx.add_scalar(sims, -margin))))
    return nx.add(
        nx.scale(pos_term, 1.0 / max(int(pos_set.sum()), 1)),
        nx.scale(neg_term, 1.0 / max(int(neg_set.sum()), 1)),
    )


# ---------------------------------------------------------------------------
# Negatives for the matching head
# ---------------------------------------------------------------------------

def top_k_cross_label(sims_row: np.ndarray, anchor_label: int, candidate_labels: np.ndarray, k: int) -> np.ndarray:
    """
    Indices of the k most similar candidates whose label differs from the
    anchor's, by similarity descending then index ascending.

    Raises:
        DegenerateInputError: If no candidate carries a different label
    """
    candidates = np.flatnonzero(candidate_labels != anchor_label)
    if len(candidates) == 0:
        raise DegenerateInputError(f"no cross-label candidates for an anchor with label {anchor_label}")
    order = np.lexsort((candidates, -sims_row[candidates]))
    return candidates[order[:k]]


def mine_hard_negatives(face_embs: ArrayOrTensor, voice_embs: ArrayOrTensor, labels_f: Sequence[int],
                        labels_v: Sequence[int], k: int = 1) -> List[Tuple[int, int]]:
    """
    Global hard negative mining over a gathered pool.

    For every voice anchor the k most similar faces with another pseudo-label,
    and symmetrically for every face anchor. Returns the deduplicated
    (face_index, voice_index) pairs in sorted order.

    Raises:
        ConfigError: If k < 1
        ShapeError: If labels do not match the pools
        DegenerateInputError: If some anchor has no cross-label candidate
    """
    if k < 1:
        raise ConfigError(f"hard_negative_k must be >= 1, got {k}")
    faces = _as_array(face_embs)
    voices = _as_array(voice_embs)
    labels_f = np.asarray(labels_f)
    labels_v = np.asarray(labels_v)
    if len(labels_f) != len(faces) or len(labels_v) != len(voices):
        raise ShapeError("mine_hard_negatives: label arrays do not match the pools")
    faces = faces / np.linalg.norm(faces, axis=1, keepdims=True)
    voices = voices / np.linalg.norm(voices, axis=1, keepdims=True)
    sims = faces @ voices.T

    pairs = set()
    for v in range(len(voices)):
        for f in top_k_cross_label(sims[:, v], labels_v[v], labels_f, k):
            pairs.add((int(f), v))
    for f in range(len(faces)):
        for v in top_k_cross_label(sims[f], labels_f[f], labels_v, k):
            pairs.add((f, int(v)))
    return sorted(pairs)


def mine_random_negatives(labels_f: Sequence[int], labels_v: Sequence[int], k: int,
                          rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Seeded random cross-label negatives: k per anchor in each direction."""
    if k < 1:
        raise ConfigError(f"negative count must be >= 1, got {k}")
    labels_f = np.asarray(labels_f)
    labels_v = np.asarray(labels_v)
    pairs = set()
    for v, label in enumerate(labels_v):
        candidates = np.flatnonzero(labels_f != label)
        if len(candidates) == 0:
            raise DegenerateInputError(f"no cross-label faces for voice {v}")
        for f in rng.choice(candidates, size=min(k, len(candidates)), replace=False):
            pairs.add((int(f), v))
    for f, label in enumerate(labels_f):
        candidates = np.flatnonzero(labels_v != label)
        if len(candidates) == 0:
            raise DegenerateInputError(f"no cross-label voices for face {f}")
        for v in rng.choice(candidates, size=min(k, len(candidates)), replace=False):
            pairs.add((f, int(v)))
    return sorted(pairs)


def build_match_batch(labels_f: Sequence[int], labels_v: Sequence[int],
                      negatives: Sequence[Tuple[int, int]]) -> MatchBatch:
    """
    Matching batch: every same-pseudo-label (face, voice) pair as a positive,
    followed by the mined negatives.
    """
    labels_f = np.asarray(labels_f)
    labels_v = np.asarray(labels_v)
    pos_f, pos_v = np.nonzero(labels_f[:, None] == labels_v[None, :])
    neg = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    return MatchBatch(
        face_idx=np.concatenate([pos_f, neg[:, 0]]).astype(np.int64),
        voice_idx=np.concatenate([pos_v, neg[:, 1]]).astype(np.int64),
        targets=np.concatenate([np.ones(len(pos_f)), np.zeros(len(neg))]),
    )


# ---------------------------------------------------------------------------
# Matching cross-entropy and the combined objective
# ---------------------------------------------------------------------------

def matching_ce_loss(probs: ArrayOrTensor, targets: Sequence[float]) -> Tensor:
    """
    Binary cross-entropy of positive-class probabilities, clamped to
    [1e-12, 1 - 1e-12] before the logs.

    Raises:
        ShapeError: If lengths differ or the input is empty
    """
    p = _as_tensor(probs)
    t = np.asarray(targets, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] != len(t) or len(t) == 0:
        raise ShapeError(f"matching_ce_loss: {p.shape} probabilities for {len(t)} targets")
    p = nx.clamp(p, CE_CLAMP, 1.0 - CE_CLAMP)
    log_pos = nx.mul(nx.constant(t), nx.log(p))
    log_neg = nx.mul(nx.constant(1.0 - t), nx.log(nx.add_scalar(nx.neg(p), 1.0)))
    return nx.scale(nx.sum(nx.add(log_pos, log_neg)), -1.0 / len(t))


def combined_loss(l_ms: Union[Tensor, float], l_ce: Union[Tensor, float], delta: float) -> Tensor:
    """
    delta * L_MS + (1 - delta) * L_CE.

    Raises:
        ConfigError: If delta is outside (0, 1)
    """
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    return nx.add(nx.scale(_as_tensor(l_ms), delta), nx.scale(_as_tensor(l_ce), 1.0 - delta))

