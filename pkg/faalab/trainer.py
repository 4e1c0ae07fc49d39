"""
Training loop: per epoch a clustering step (pseudo-labels) followed by a
metric-learning step over mini-batches, validation, and progressive halving
of the cluster count. Also holds checkpoint I/O and the history writers.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from faalab import metrics
from faalab import numerics as nx
from faalab.clustering import (
    PseudoLabeling,
    ProgressState,
    assign_pseudo_labels,
    dump_assignments,
    labeling_nmi,
    progressive_step,
)
from faalab.errors import CheckpointFormatError, ConfigError, ContractError, NonFiniteLossError, ShapeError
from faalab.evalsuite import EvalConfig, validation_auc
from faalab.fusion import match_scores
from faalab.model import ArchConfig, ModelParams, build_model
from faalab.objectives import (
    MiningConfig,
    build_match_batch,
    combined_loss,
    contrastive_loss,
    matching_ce_loss,
    mine_hard_negatives,
    mine_random_negatives,
    ms_loss,
)
from faalab.optim import AdamW
from faalab.synthworld import Dataset, VideoRecord

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FAAC"
CHECKPOINT_VERSION = 1
# Fixed-C ablation: 1000 clusters for 16650 training videos, scaled to the world size
FIXED_C_RATIO = 1000 / 16650

# Purpose tags for derived random streams
_TAG_KMEANS = 1
_TAG_BATCHES = 2
_TAG_SAMPLES = 3
_TAG_NEGATIVES = 4
_TAG_DROPOUT = 5


class TrainConfig(BaseModel):
    """
    Optimisation and loop settings. Defaults are desk scale; ``TrainConfig.full_scale()``
    gives the full-scale setting (batch 256, lr 1e-4, 50 epochs of one pass each,
    full-size network).
    """

    batch_size: int = Field(default=64, ge=2, description="Videos per mini-batch (N)")
    lr: float = Field(default=3e-3, gt=0.0, description="AdamW learning rate (constant)")
    weight_decay: float = Field(default=0.01, ge=0.0, description="Decoupled weight decay")
    max_epochs: int = Field(default=30, ge=1, description="Number of epochs P")
    iterations_per_epoch: int = Field(
        default=4, ge=1,
        description="Metric-learning passes over the shuffled training videos per clustering step (T); "
                    "each pass draws fresh samples",
    )
    patience: int = Field(default=3, ge=1, description="Stalled epochs before C is halved")
    min_clusters: int = Field(default=2, ge=2, description="Floor for the cluster count")
    delta: float = Field(default=0.9, gt=0.0, lt=1.0, description="Weight of the alignment loss in the objective")
    mining: MiningConfig = Field(default_factory=MiningConfig)
    hard_negative_k: int = Field(default=1, ge=1, description="Negatives mined per anchor and direction")
    seed: int = Field(default=0, ge=0, description="Run seed")
    num_simulated_workers: int = Field(default=1, ge=1, description="Shards the batch is split into before gathering")
    reset_moments_on_halving: bool = Field(default=True, description="Reset AdamW moments when C is halved")
    arch: ArchConfig = Field(default_factory=ArchConfig)
    debug_nan_at_batch: Optional[int] = Field(
        default=None, ge=0, description="Force a NaN loss at this global batch index (abort-path check)"
    )
    dump_clusters: bool = Field(default=False, description="Write clusters_epoch{p}.json each epoch")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        values = dict(batch_size=256, lr=1e-4, max_epochs=50, iterations_per_epoch=1, arch=ArchConfig.full_scale())
        values.update(overrides)
        return cls(**values)


class AblationConfig(BaseModel):
    """Switches spanning the ablation grid."""

    loss: Literal["ms", "contrastive"] = Field(default="ms", description="Alignment loss")
    fusion_scoring: bool = Field(
        default=True, description="Train and score with the fusion encoder; off means cosine scoring and no CE term"
    )
    pair_selection: Literal["progressive_hardneg", "fixed_random"] = Field(
        default="progressive_hardneg",
        description="Progressive C with hard negatives, or fixed C with random negatives",
    )
    fixed_C: Optional[int] = Field(default=None, ge=2, description="Cluster count for fixed_random (None = scaled)")

    @field_validator("pair_selection", mode="before")
    @classmethod
    def normalise_pair_selection(cls, v):
        aliases = {"progressive+hardneg": "progressive_hardneg", "fixed-C+random-neg": "fixed_random"}
        return aliases.get(v, v)


@dataclass
class Checkpoint:
    """Parameter snapshot plus the training state it was taken in."""

    arch: ArchConfig
    state: Dict[str, np.ndarray]
    progress: ProgressState
    epoch: int
    val_metric: float
    version: int = CHECKPOINT_VERSION

    def restore(self) -> ModelParams:
        """Rebuild a model carrying exactly these parameter values."""
        face_dim = self.state["face.w1"].shape[0]
        voice_dim = self.state["voice.w1"].shape[0]
        model = build_model(self.arch, face_dim, voice_dim, seed=0)
        model.load_state(self.state)
        return model


@dataclass
class EpochRecord:
    epoch: int
    clusters: int
    clusters_used: int
    loss_ms: float
    loss_ce: float
    loss: float
    val_auc: float
    batches: int
    skipped_batches: int
    halved: bool
    pseudo_label_nmi: float
    wall_time: float = 0.0

    def to_json(self) -> Dict[str, object]:
        """Deterministic fields only (no wall time)."""
        return {
            "epoch": self.epoch,
            "clusters": self.clusters,
            "clusters_used": self.clusters_used,
            "loss_ms": self.loss_ms,
            "loss_ce": self.loss_ce,
            "loss": self.loss,
            "val_auc": self.val_auc,
            "batches": self.batches,
            "skipped_batches": self.skipped_batches,
            "halved": self.halved,
            "pseudo_label_nmi": self.pseudo_label_nmi,
        }


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        expected = len(self.records) + 1
        if record.epoch != expected:
            raise ContractError(f"history expects epoch {expected}, got {record.epoch}")
        self.records.append(record)

    @property
    def best(self) -> Optional[EpochRecord]:
        if not self.records:
            return None
        return max(self.records, key=lambda r: (r.val_auc, -r.epoch))

    def write(self, path: Union[str, Path]) -> None:
        lines = [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        Path(path).write_text("".join(line + "\n" for line in lines))

    def write_timings(self, path: Union[str, Path]) -> None:
        lines = [json.dumps({"epoch": r.epoch, "wall_time": r.wall_time}) for r in self.records]
        Path(path).write_text("".join(line + "\n" for line in lines))


@dataclass
class TrainResult:
    best: Checkpoint
    history: TrainHistory
    final_progress: ProgressState
    final_labeling: PseudoLabeling
    model: ModelParams


@dataclass
class GlobalPool:
    """Gathered embeddings of all simulated workers, in shard order."""

    face_embs: np.ndarray
    voice_embs: np.ndarray
    labels: np.ndarray
    shard_offsets: List[int]


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for a (seed, purpose, epoch, batch, ...) stream."""
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def resolve_fixed_clusters(ablation: AblationConfig, num_train_videos: int) -> int:
    """
    Cluster count for the fixed-C ablation.

    Raises:
        ConfigError: If an explicit fixed_C exceeds the training videos
    """
    if ablation.fixed_C is not None:
        if ablation.fixed_C > num_train_videos:
            raise ConfigError(f"fixed_C ({ablation.fixed_C}) exceeds the {num_train_videos} training videos")
        return ablation.fixed_C
    return max(2, int(round(FIXED_C_RATIO * num_train_videos)))


def gather_global_pool(shards: Sequence[Tuple[np.ndarray, np.ndarray, Sequence[int]]]) -> GlobalPool:
    """
    Concatenate worker shards in shard order, skipping empty shards.

    Raises:
        ShapeError: If shard widths disagree or a shard is internally inconsistent
    """
    faces, voices, labels, offsets = [], [], [], []
    width = None
    total = 0
    for face_embs, voice_embs, shard_labels in shards:
        face_embs = np.asarray(face_embs, dtype=np.float64)
        voice_embs = np.asarray(voice_embs, dtype=np.float64)
        if len(face_embs) == 0 and len(voice_embs) == 0:
            continue
        if face_embs.ndim != 2 or voice_embs.ndim != 2 or not (len(face_embs) == len(voice_embs) == len(shard_labels)):
            raise ShapeError("shard faces, voices and labels must have equal lengths")
        dims = (face_embs.shape[1], voice_embs.shape[1])
        if width is None:
            width = dims
        elif dims != width:
            raise ShapeError(f"shard widths {dims} differ from {width}")
        offsets.append(total)
        total += len(face_embs)
        faces.append(face_embs)
        voices.append(voice_embs)
        labels.append(np.asarray(shard_labels))
    if not faces:
        raise ShapeError("no non-empty shard to gather")
    return GlobalPool(np.concatenate(faces), np.concatenate(voices), np.concatenate(labels), offsets)


def validate(model: ModelParams, val_videos: Sequence[VideoRecord], trial_seed: int, count: int = 1000,
             scoring: str = "fusion") -> float:
    """Validation verification AUC on a fixed seeded trial list."""
    return validation_auc(model, val_videos, count, trial_seed, scoring=scoring)


def _batches(num_videos: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(num_videos)
    chunks = [order[i:i + batch_size] for i in range(0, num_videos, batch_size)]
    return [c for c in chunks if len(c) >= 2]


def _epoch_batches(num_videos: int, config: TrainConfig, epoch: int) -> List[np.ndarray]:
    """Batches of every metric-learning pass in an epoch; pass t reshuffles with its own stream."""
    out: List[np.ndarray] = []
    for t in range(config.iterations_per_epoch):
        out.extend(_batches(num_videos, config.batch_size, derive_rng(config.seed, _TAG_BATCHES, epoch, t)))
    return out


def _train_step(model: ModelParams, videos: Sequence[VideoRecord], labels: np.ndarray, config: TrainConfig,
                ablation: AblationConfig, rngs: Dict[str, np.random.Generator], force_nan: bool,
                epoch: int, batch: int) -> Tuple[Dict[str, float], Dict[str, np.ndarray]]:
    """Forward and backward for one mini-batch; returns loss components and gradients."""
    sample_rng = rngs["samples"]
    faces = np.stack([v.faces[sample_rng.integers(len(v.faces))] for v in videos])
    voices = np.stack([v.voices[sample_rng.integers(len(v.voices))] for v in videos])
    shards = [s for s in np.array_split(np.arange(len(videos)), config.num_simulated_workers) if len(s)]
    params = model.named_parameters()

    with nx.GradTape() as tape:
        face_parts = [model.encode("face", nx.constant(faces[s])) for s in shards]
        voice_parts = [model.encode("voice", nx.constant(voices[s])) for s in shards]
        face_embs = nx.concat(face_parts, axis=0)
        voice_embs = nx.concat(voice_parts, axis=0)

        stacked = nx.concat([face_embs, voice_embs], axis=0)
        stacked_labels = np.concatenate([labels, labels])
        if ablation.loss == "ms":
            l_ms = ms_loss(stacked, stacked_labels, config.mining)
        else:
            l_ms = contrastive_loss(stacked, stacked_labels)

        l_ce = None
        if ablation.fusion_scoring:
            if ablation.pair_selection == "progressive_hardneg":
                pool = gather_global_pool(
                    [(fp.data, vp.data, labels[s]) for fp, vp, s in zip(face_parts, voice_parts, shards)]
                )
                negatives = mine_hard_negatives(pool.face_embs, pool.voice_embs, pool.labels, pool.labels,
                                                config.hard_negative_k)
            else:
                negatives = mine_random_negatives(labels, labels, config.hard_negative_k, rngs["negatives"])
            match = build_match_batch(labels, labels, negatives)
            probs = match_scores(
                nx.take(face_embs, match.face_idx, axis=0),
                nx.take(voice_embs, match.voice_idx, axis=0),
                model.fusion,
                rng=rngs["dropout"] if config.arch.dropout > 0 else None,
            )
            l_ce = matching_ce_loss(probs, match.targets)
            loss = combined_loss(l_ms, l_ce, config.delta)
        else:
            loss = l_ms
        if force_nan:
            loss = nx.add_scalar(loss, float("nan"))

    components = {
        "loss_ms": l_ms.item(),
        "loss_ce": l_ce.item() if l_ce is not None else 0.0,
        "loss": loss.item(),
    }
    if not all(np.isfinite(v) for v in components.values()):
        raise NonFiniteLossError(epoch, batch, components)
    if l_ce is not None:
        expected = config.delta * components["loss_ms"] + (1.0 - config.delta) * components["loss_ce"]
        if abs(components["loss"] - expected) > 1e-12:
            raise ContractError(f"combined loss {components['loss']} != weighted sum {expected}")

    tape.backward(loss)
    return components, {name: tape.gradient(p) for name, p in params.items()}


def train(dataset: Dataset, config: TrainConfig, ablation: Optional[AblationConfig] = None,
          eval_config: Optional[EvalConfig] = None, out_dir: Optional[Union[str, Path]] = None,
          threads: int = 1) -> TrainResult:
    """
    Run the clustering / metric-learning loop and keep the best model on the
    validation partition. The test partition is never read.

    Raises:
        NonFiniteLossError: If a loss becomes NaN or infinite
        ConfigError: If the configuration does not fit the dataset
    """
    ablation = ablation or AblationConfig()
    eval_config = eval_config or EvalConfig()
    train_videos = sorted(dataset.partition("train"), key=lambda v: v.video_id)
    val_videos = dataset.partition("val")
    if len(train_videos) < 2:
        raise ConfigError("training needs at least 2 videos")
    out = Path(out_dir) if out_dir is not None else None

    world = dataset.config
    model = build_model(config.arch, world.face_dim, world.voice_dim, config.seed)
    optimizer = AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    progressive = ablation.pair_selection == "progressive_hardneg"
    initial_clusters = len(train_videos) if progressive else resolve_fixed_clusters(ablation, len(train_videos))
    progress = ProgressState(clusters=initial_clusters, min_clusters=min(config.min_clusters, initial_clusters))
    scoring = "fusion" if ablation.fusion_scoring else "cosine"

    logger.info(
        f"Training on {len(train_videos)} videos: C0={initial_clusters}, loss={ablation.loss}, "
        f"scoring={scoring}, pairs={ablation.pair_selection}, passes={config.iterations_per_epoch}, "
        f"params={model.num_parameters()}"
    )

    history = TrainHistory()
    best: Optional[Checkpoint] = None
    labeling: Optional[PseudoLabeling] = None
    global_batch = 0

    for epoch in range(1, config.max_epochs + 1):
        started = metrics.track_epoch_start()
        kmeans_seed = int(derive_rng(config.seed, _TAG_KMEANS, epoch).integers(2 ** 31))
        labeling = assign_pseudo_labels(train_videos, model, progress.clusters, seed=kmeans_seed,
                                        epoch=epoch, threads=threads)
        if config.dump_clusters and out is not None:
            dump_assignments(labeling, out / f"clusters_epoch{epoch}.json")
        labels_all = labeling.labels_for([v.video_id for v in train_videos])

        sums = {"loss_ms": 0.0, "loss_ce": 0.0, "loss": 0.0}
        trained = skipped = 0
        for b, idx in enumerate(_epoch_batches(len(train_videos), config, epoch)):
            labels = labels_all[idx]
            if np.all(labels == labels[0]):
                skipped += 1
                metrics.track_batch(False)
                logger.warning(f"Epoch {epoch} batch {b}: all pseudo-labels identical, skipped")
                global_batch += 1
                continue
            rngs = {
                "samples": derive_rng(config.seed, _TAG_SAMPLES, epoch, b),
                "negatives": derive_rng(config.seed, _TAG_NEGATIVES, epoch, b),
                "dropout": derive_rng(config.seed, _TAG_DROPOUT, epoch, b),
            }
            components, grads = _train_step(
                model, [train_videos[i] for i in idx], labels, config, ablation, rngs,
                force_nan=config.debug_nan_at_batch == global_batch, epoch=epoch, batch=b,
            )
            optimizer.step(grads)
            for key, value in components.items():
                sums[key] += value
            trained += 1
            global_batch += 1
            metrics.track_batch(True)
            logger.debug(f"Epoch {epoch} batch {b}: " + ", ".join(f"{k}={v:.6f}" for k, v in components.items()))

        val_auc = validate(model, val_videos, eval_config.val_trial_seed, eval_config.val_trials, scoring)
        clusters_this_epoch = progress.clusters
        if progressive:
            progress = progressive_step(progress, val_auc, config.patience)
            if progress.recluster and config.reset_moments_on_halving:
                optimizer.reset()
        elif val_auc > progress.best_val_metric:
            progress = replace(progress, best_val_metric=val_auc, epochs_since_improvement=0)
        else:
            progress = replace(progress, epochs_since_improvement=progress.epochs_since_improvement + 1)

        if best is None or val_auc > best.val_metric:
            best = Checkpoint(
                arch=config.arch,
                state={name: t.data.copy() for name, t in model.named_parameters().items()},
                progress=progress,
                epoch=epoch,
                val_metric=val_auc,
            )

        wall = metrics.track_epoch_complete(started, progress.clusters, val_auc)
        denom = max(trained, 1)
        record = EpochRecord(
            epoch=epoch,
            clusters=clusters_this_epoch,
            clusters_used=labeling.num_clusters,
            loss_ms=sums["loss_ms"] / denom,
            loss_ce=sums["loss_ce"] / denom,
            loss=sums["loss"] / denom,
            val_auc=val_auc,
            batches=trained,
            skipped_batches=skipped,
            halved=progress.clusters < clusters_this_epoch,
            pseudo_label_nmi=labeling_nmi(labeling, train_videos),
            wall_time=wall,
        )
        history.append(record)
        logger.info(
            f"Epoch {epoch}/{config.max_epochs}: C={clusters_this_epoch} loss={record.loss:.4f} "
            f"(ms={record.loss_ms:.4f}, ce={record.loss_ce:.4f}) val_auc={val_auc:.4f} "
            f"nmi={record.pseudo_label_nmi:.3f} skipped={skipped} [{wall:.1f}s]"
        )

    return TrainResult(best=best, history=history, final_progress=progress, final_labeling=labeling, model=model)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    """
    Write a checkpoint.

    Layout (little-endian): magic "FAAC", version u32, metadata length u32,
    metadata JSON, entry count u32, then per entry: name length u32, name,
    ndim u32, dims u64 x ndim, float64 data.
    """
    meta = {
        "arch": checkpoint.arch.model_dump(mode="json"),
        "progress": checkpoint.progress.to_dict(),
        "epoch": checkpoint.epoch,
        "val_metric": checkpoint.val_metric,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", checkpoint.version, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(checkpoint.state))]
    for name in sorted(checkpoint.state):
        array = np.ascontiguousarray(checkpoint.state[name], dtype="<f8")
        encoded = name.encode()
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{array.ndim}Q", array.ndim, *array.shape))
        parts.append(array.tobytes())
    Path(path).write_bytes(b"".join(parts))
    logger.info(f"Saved checkpoint (epoch {checkpoint.epoch}, val {checkpoint.val_metric:.4f}) to {path}")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointFormatError: On a wrong magic, unsupported version or truncated file
    """
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    try:
        version, meta_len = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(raw[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        state: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + name_len].decode()
            pos += name_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(raw):
                raise CheckpointFormatError(f"{path}: truncated entry '{name}'")
            state[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(raw):
            raise CheckpointFormatError(f"{path}: {len(raw) - pos} trailing bytes")
        return Checkpoint(
            arch=ArchConfig.model_validate(meta["arch"]),
            state=state,
            progress=ProgressState.from_dict(meta["progress"]),
            epoch=int(meta["epoch"]),
            val_metric=float(meta["val_metric"]),
            version=version,
        )
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: corrupt checkpoint ({e})")


def checkpoint_digest(path: Union[str, Path]) -> str:
    """SHA-256 of the checkpoint file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_outputs(result: TrainResult, out_dir: Union[str, Path]) -> Path:
    """Write model.faac, history.jsonl, timings.jsonl and final_state.json; returns the checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.faac"
    save_checkpoint(result.best, ckpt_path)
    result.history.write(out / "history.jsonl")
    result.history.write_timings(out / "timings.jsonl")
    final = {
        "final_clusters": result.final_progress.clusters,
        "halvings": result.final_progress.halvings,
        "best_epoch": result.best.epoch,
        "best_val_auc": result.best.val_metric,
        "final_pseudo_label_nmi": result.history.records[-1].pseudo_label_nmi,
    }
    (out / "final_state.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
    return ckpt_path
