"""
Pseudo-label production.

- Dual-modality pooling: mean face embedding concatenated with mean voice embedding per video
- Seeded k-means (k-means++ initialisation, Lloyd iterations)
- Progressive clustering controller halving C when validation stalls
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
from sklearn.metrics import normalized_mutual_info_score

from faalab.errors import ConfigError, ContractError, DegenerateInputError
from faalab.model import ModelParams
from faalab.synthworld import VideoRecord

logger = logging.getLogger(__name__)

MAX_LLOYD_ITERATIONS = 100
_CHUNK = 512


@dataclass
class VideoEmbedding:
    """Pooled representation of one video: face-pool concatenated with voice-pool."""

    video_id: int
    vector: np.ndarray


@dataclass
class PseudoLabeling:
    """
    Video -> cluster assignment produced by one clustering step.

    Attributes:
        assignments: video_id -> dense cluster id in [0, num_clusters)
        requested_clusters: The C passed to k-means
        num_clusters: Distinct clusters after dense relabelling
        produced_at_epoch: Epoch whose clustering step produced it
        inertia: Final k-means inertia
    """

    assignments: Dict[int, int]
    requested_clusters: int
    num_clusters: int
    produced_at_epoch: int = 0
    inertia: float = 0.0

    def labels_for(self, video_ids: Sequence[int]) -> np.ndarray:
        return np.array([self.assignments[v] for v in video_ids], dtype=np.int64)


@dataclass(frozen=True)
class ProgressState:
    """
    Progressive clustering controller state.

    Attributes:
        clusters: Current C
        best_val_metric: Best validation metric seen so far
        epochs_since_improvement: Epochs without a strict improvement
        min_clusters: Floor for C (>= 2)
        recluster: True when the last step halved C
        halvings: Number of halvings so far
    """

    clusters: int
    best_val_metric: float = float("-inf")
    epochs_since_improvement: int = 0
    min_clusters: int = 2
    recluster: bool = False
    halvings: int = 0

    def __post_init__(self):
        if self.min_clusters < 2:
            raise ConfigError(f"min_clusters must be >= 2, got {self.min_clusters}")
        if self.clusters < self.min_clusters:
            raise ConfigError(f"clusters ({self.clusters}) must be >= min_clusters ({self.min_clusters})")
        if self.epochs_since_improvement < 0:
            raise ConfigError("epochs_since_improvement must be >= 0")

    def to_dict(self) -> Dict[str, object]:
        return {
            "clusters": self.clusters,
            "best_val_metric": self.best_val_metric,
            "epochs_since_improvement": self.epochs_since_improvement,
            "min_clusters": self.min_clusters,
            "recluster": self.recluster,
            "halvings": self.halvings,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ProgressState":
        return cls(**data)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    inertia_history: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Dual-modality pooling
# ---------------------------------------------------------------------------

def pool_embeddings(face_embs: np.ndarray, voice_embs: np.ndarray) -> np.ndarray:
    """
    Mean of the face embeddings concatenated with the mean of the voice embeddings.

    Raises:
        DegenerateInputError: If either modality is empty
    """
    face_embs = np.asarray(face_embs, dtype=np.float64)
    voice_embs = np.asarray(voice_embs, dtype=np.float64)
    if len(face_embs) == 0 or len(voice_embs) == 0:
        raise DegenerateInputError("pooling needs at least one face and one voice embedding")
    return np.concatenate([face_embs.mean(axis=0), voice_embs.mean(axis=0)])


def pool_video(video: VideoRecord, model: ModelParams) -> VideoEmbedding:
    """Encode every face and voice of a video and pool them."""
    if len(video.faces) == 0 or len(video.voices) == 0:
        raise DegenerateInputError(f"video {video.video_id} has an empty modality")
    faces = model.embed_numpy("face", video.faces).data
    voices = model.embed_numpy("voice", video.voices).data
    return VideoEmbedding(video.video_id, pool_embeddings(faces, voices))


def pool_videos(videos: Sequence[VideoRecord], model: ModelParams) -> np.ndarray:
    """Pooled vectors for many videos (one encoder pass per modality), rows in input order."""
    face_counts = [len(v.faces) for v in videos]
    voice_counts = [len(v.voices) for v in videos]
    if min(face_counts, default=1) == 0 or min(voice_counts, default=1) == 0:
        raise DegenerateInputError("a video has an empty modality")
    faces = model.embed_numpy("face", np.concatenate([v.faces for v in videos])).data
    voices = model.embed_numpy("voice", np.concatenate([v.voices for v in videos])).data
    face_starts = np.concatenate([[0], np.cumsum(face_counts)[:-1]])
    voice_starts = np.concatenate([[0], np.cumsum(voice_counts)[:-1]])
    face_pool = np.add.reduceat(faces, face_starts, axis=0) / np.asarray(face_counts)[:, None]
    voice_pool = np.add.reduceat(voices, voice_starts, axis=0) / np.asarray(voice_counts)[:, None]
    return np.concatenate([face_pool, voice_pool], axis=1)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _sq_distances(points: np.ndarray, centroids: np.ndarray, threads: int = 1) -> np.ndarray:
    """Exact squared distances, computed in fixed row chunks (identical for any thread count)."""
    def chunk(start):
        block = points[start:start + _CHUNK]
        return ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)

    starts = range(0, len(points), _CHUNK)
    if threads > 1 and len(points) > _CHUNK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    return np.concatenate(parts, axis=0)


def _kmeans_pp_init(points: np.ndarray, clusters: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, clusters):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def kmeans(points: np.ndarray, clusters: int, seed: int, threads: int = 1) -> KMeansResult:
    """
    Lloyd's k-means from a seeded k-means++ initialisation.

    Runs until the assignment reaches a fixpoint or 100 iterations. Ties in the
    nearest-centroid search go to the lowest centroid index; an empty cluster is
    re-seeded at the point farthest from its assigned centroid.

    Raises:
        ConfigError: If clusters > number of points or clusters < 1
        DegenerateInputError: If points contain NaN or infinities
        ContractError: If the inertia ever increases between iterations
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if clusters < 1 or clusters > n:
        raise ConfigError(f"kmeans: cannot form {clusters} clusters from {n} points")
    if not np.all(np.isfinite(points)):
        raise DegenerateInputError("kmeans: points contain non-finite values")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, clusters, rng)
    assignments = None
    history: List[float] = []

    iteration = 0
    for iteration in range(1, MAX_LLOYD_ITERATIONS + 1):
        dists = _sq_distances(points, centroids, threads)
        new_assignments = np.argmin(dists, axis=1)
        own = dists[np.arange(n), new_assignments]
        inertia = float(own.sum())
        if history and inertia > history[-1] * (1.0 + 1e-12) + 1e-12:
            raise ContractError(f"kmeans inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if assignments is not None and np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments

        counts = np.bincount(assignments, minlength=clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty][:, None]
        if not nonempty.all():
            distance_to_own = own.copy()
            for empty in np.flatnonzero(~nonempty):
                far = int(np.argmax(distance_to_own))
                centroids[empty] = points[far]
                distance_to_own[far] = -1.0

    return KMeansResult(
        assignments=new_assignments,
        centroids=centroids,
        inertia=history[-1],
        iterations=iteration,
        inertia_history=history,
    )


def dense_relabel(assignments: np.ndarray) -> np.ndarray:
    """Relabel cluster ids densely in order of first appearance."""
    mapping: Dict[int, int] = {}
    out = np.empty(len(assignments), dtype=np.int64)
    for i, a in enumerate(assignments):
        out[i] = mapping.setdefault(int(a), len(mapping))
    return out


def assign_pseudo_labels(train_videos: Sequence[VideoRecord], model: ModelParams, clusters: int, seed: int,
                         epoch: int = 0, threads: int = 1) -> PseudoLabeling:
    """
    Clustering step: pool every training video, run k-means, store dense labels.

    Videos are processed in video-id order, so the result does not depend on
    the order in which they are passed.

    Raises:
        ConfigError: If clusters exceeds the number of training videos
    """
    ordered = sorted(train_videos, key=lambda v: v.video_id)
    if clusters > len(ordered):
        raise ConfigError(f"cannot form {clusters} clusters from {len(ordered)} training videos")
    pooled = pool_videos(ordered, model)
    result = kmeans(pooled, clusters, seed, threads=threads)
    labels = dense_relabel(result.assignments)
    labeling = PseudoLabeling(
        assignments={v.video_id: int(label) for v, label in zip(ordered, labels)},
        requested_clusters=clusters,
        num_clusters=int(labels.max()) + 1,
        produced_at_epoch=epoch,
        inertia=result.inertia,
    )
    logger.debug(
        f"Clustering epoch {epoch}: C={clusters}, used={labeling.num_clusters}, "
        f"inertia={result.inertia:.4f}, iterations={result.iterations}"
    )
    return labeling


def progressive_step(state: ProgressState, val_metric: float, patience: int = 3) -> ProgressState:
    """
    Advance the controller after an epoch's validation.

    A strict improvement resets the counter; otherwise the counter grows, and
    when it reaches ``patience`` C is halved (never below the floor), the
    counter resets and re-clustering is flagged.

    Raises:
        ConfigError: If patience < 1
    """
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    if val_metric > state.best_val_metric:
        return replace(state, best_val_metric=val_metric, epochs_since_improvement=0, recluster=False)
    counter = state.epochs_since_improvement + 1
    if counter < patience:
        return replace(state, epochs_since_improvement=counter, recluster=False)
    halved = max(state.min_clusters, state.clusters // 2)
    if halved < state.clusters:
        logger.info(f"Validation stalled for {counter} epochs: halving C {state.clusters} -> {halved}")
    return replace(
        state,
        clusters=halved,
        epochs_since_improvement=0,
        recluster=halved < state.clusters,
        halvings=state.halvings + (1 if halved < state.clusters else 0),
    )


def normalized_mutual_info(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """NMI between two labelings (arithmetic normalisation)."""
    return float(normalized_mutual_info_score(labels_a, labels_b))


def labeling_nmi(labeling: PseudoLabeling, videos: Sequence[VideoRecord]) -> float:
    """NMI between pseudo-labels and ground-truth identities of the given videos."""
    ids = [v.video_id for v in videos]
    return normalized_mutual_info(labeling.labels_for(ids), [v.identity_id for v in videos])


def dump_assignments(labeling: PseudoLabeling, path: Union[str, Path]) -> None:
    """Write a clustering result as JSON (debugging aid)."""
    payload = {
        "epoch": labeling.produced_at_epoch,
        "requested_clusters": labeling.requested_clusters,
        "num_clusters": labeling.num_clusters,
        "inertia": labeling.inertia,
        "assignments": {str(k): v for k, v in sorted(labeling.assignments.items())},
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
