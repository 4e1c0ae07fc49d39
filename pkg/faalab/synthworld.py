"""
Synthetic identity world: identities with shared latents emitting correlated
face and voice feature vectors, grouped into videos, split identity-disjoint
into train / val / test.

Defines the WorldConfig Pydantic model, the in-memory Dataset, the generator,
and the on-disk format (manifest.json + one FAAD blob per partition).
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from faalab.errors import ConfigError, DatasetCorruptionError, DatasetFormatError

logger = logging.getLogger(__name__)

PARTITIONS = ("train", "val", "test")
BLOB_MAGIC = b"FAAD"
BLOB_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class WorldConfig(BaseModel):
    """
    Parameters of a synthetic world.

    The default describes the desk-scale world: 96 identities split 64/16/16,
    4 videos per identity, 4 faces and 2 voices per video.
    """

    num_identities: int = Field(default=96, ge=3, description="Total number of identities")
    identity_split: Tuple[float, float, float] = Field(
        default=(64 / 96, 16 / 96, 16 / 96),
        description="Fractions of identities assigned to (train, val, test)",
    )
    latent_dim: int = Field(default=16, ge=2, description="Dimension of the identity latent z")
    face_dim: int = Field(default=32, ge=2, description="Dimension of a raw face feature vector (>= latent_dim)")
    voice_dim: int = Field(default=24, ge=2, description="Dimension of a raw voice feature vector (>= latent_dim)")
    videos_per_identity: int = Field(default=4, ge=1, description="Videos generated per identity")
    faces_per_video: int = Field(default=4, ge=1, description="Face samples per video (n)")
    voices_per_video: int = Field(default=2, ge=1, description="Voice samples per video (m)")
    noise_std: float = Field(default=0.1, ge=0.0, description="Std of additive per-sample noise")
    cross_modal_strength: float = Field(
        default=0.9, ge=0.0, le=1.0,
        description="Weight s of the shared latent in both modalities (0 = no association)",
    )
    group_offset: float = Field(
        default=1.0, ge=0.0,
        description="Norm of the latent offset separating the two groups (enters through the shared term)",
    )
    seed: int = Field(default=0, ge=0, lt=2 ** 64, description="Seed fully determining the world")

    @field_validator("identity_split")
    def validate_split(cls, v):
        """Validate that split fractions are non-negative and sum to one."""
        if any(f < 0 for f in v):
            raise ValueError(f"identity_split fractions must be non-negative, got {v}")
        if abs(float(np.sum(v)) - 1.0) > 1e-9:
            raise ValueError(f"identity_split must sum to 1, got {float(np.sum(v))}")
        return v

    @model_validator(mode="after")
    def validate_dims(self):
        """Mixing matrices must be full column rank."""
        if self.face_dim < self.latent_dim or self.voice_dim < self.latent_dim:
            raise ValueError(
                f"face_dim ({self.face_dim}) and voice_dim ({self.voice_dim}) must be >= latent_dim ({self.latent_dim})"
            )
        return self

    def partition_sizes(self) -> Dict[str, int]:
        """
        Number of identities per partition.

        Raises:
            ConfigError: If any partition would be empty
        """
        n_train = int(round(self.identity_split[0] * self.num_identities))
        n_val = int(round(self.identity_split[1] * self.num_identities))
        n_test = self.num_identities - n_train - n_val
        sizes = {"train": n_train, "val": n_val, "test": n_test}
        for name, size in sizes.items():
            if size < 1:
                raise ConfigError(f"identity_split: partition '{name}' would be empty ({sizes})")
        return sizes


@dataclass
class VideoRecord:
    """
    One video: its hidden identity, group attribute and raw samples.

    Attributes:
        video_id: Globally unique id
        identity_id: Ground truth identity (evaluation only, never used for training)
        group: Binary group attribute (gender analog for the G protocols)
        faces: Array (n x face_dim)
        voices: Array (m x voice_dim)
    """

    video_id: int
    identity_id: int
    group: int
    faces: np.ndarray
    voices: np.ndarray

    def __post_init__(self):
        if len(self.faces) == 0 or len(self.voices) == 0:
            raise DatasetCorruptionError(f"video {self.video_id} has an empty modality")
        for modality, rows in (("face", self.faces), ("voice", self.voices)):
            if not np.all(np.isfinite(rows)):
                raise DatasetCorruptionError(f"video {self.video_id} has non-finite {modality} values")


@dataclass
class MixingTruth:
    """Ground-truth generative matrices of a world (recomputable from the seed)."""

    face_mixing: np.ndarray
    voice_mixing: np.ndarray
    group_direction: np.ndarray


@dataclass
class Dataset:
    """Identity-disjoint partitions of videos plus the config that produced them."""

    config: WorldConfig
    partitions: Dict[str, List[VideoRecord]] = field(default_factory=dict)

    def partition(self, name: str) -> List[VideoRecord]:
        return self.partitions[name]

    def identity_ids(self, name: str) -> set:
        return {v.identity_id for v in self.partitions[name]}

    def validate(self) -> None:
        """
        Check the dataset invariants.

        Raises:
            ConfigError: If a partition is empty
            DatasetCorruptionError: If identities overlap or video ids repeat
        """
        for name in PARTITIONS:
            if not self.partitions.get(name):
                raise ConfigError(f"partition '{name}' is empty")
        for i, a in enumerate(PARTITIONS):
            for b in PARTITIONS[i + 1:]:
                overlap = self.identity_ids(a) & self.identity_ids(b)
                if overlap:
                    raise DatasetCorruptionError(f"partitions {a} and {b} share identities {sorted(overlap)[:5]}")
        ids = [v.video_id for name in PARTITIONS for v in self.partitions[name]]
        if len(ids) != len(set(ids)):
            raise DatasetCorruptionError("video ids are not globally unique")

    def summary(self) -> List[Dict[str, int]]:
        """Per-partition counts of videos, voice clips, face images and identities."""
        rows = []
        for name in PARTITIONS:
            videos = self.partitions.get(name, [])
            rows.append({
                "partition": name,
                "video": len(videos),
                "audio": int(np.sum([len(v.voices) for v in videos])),
                "face": int(np.sum([len(v.faces) for v in videos])),
                "id": len({v.identity_id for v in videos}),
            })
        return rows


def draw_mixing(config: WorldConfig) -> MixingTruth:
    """
    Draw the world's fixed mixing matrices; these are the first draws of the seeded stream.
    """
    rng = np.random.default_rng(config.seed)
    while True:
        face_mixing = rng.standard_normal((config.face_dim, config.latent_dim)) / np.sqrt(config.latent_dim)
        voice_mixing = rng.standard_normal((config.voice_dim, config.latent_dim)) / np.sqrt(config.latent_dim)
        if (np.linalg.matrix_rank(face_mixing) == config.latent_dim
                and np.linalg.matrix_rank(voice_mixing) == config.latent_dim):
            break
    direction = rng.standard_normal(config.latent_dim)
    direction /= np.linalg.norm(direction)
    return MixingTruth(face_mixing, voice_mixing, direction)


def generate_world(config: WorldConfig) -> Dataset:
    """
    Generate a synthetic world fully determined by ``config.seed``.

    Face sample = A_f (s (z + o_g) + (1 - s) z_f) + noise, voice sample likewise
    with A_v and z_v, where o_g = +/- group_offset along a fixed direction.
    Samples are rounded to float32 so that storage round-trips are exact.

    Raises:
        ConfigError: If the identity split leaves a partition empty
    """
    sizes = config.partition_sizes()
    truth = draw_mixing(config)
    rng = np.random.default_rng([config.seed, 1])
    s = config.cross_modal_strength

    bounds = {
        "train": (0, sizes["train"]),
        "val": (sizes["train"], sizes["train"] + sizes["val"]),
        "test": (sizes["train"] + sizes["val"], config.num_identities),
    }
    partitions: Dict[str, List[VideoRecord]] = {name: [] for name in PARTITIONS}
    video_id = 0
    for identity in range(config.num_identities):
        z = rng.standard_normal(config.latent_dim)
        z_face = rng.standard_normal(config.latent_dim)
        z_voice = rng.standard_normal(config.latent_dim)
        group = int(rng.integers(0, 2))
        shared = z + (1.0 if group else -1.0) * config.group_offset * truth.group_direction
        face_mean = truth.face_mixing @ (s * shared + (1.0 - s) * z_face)
        voice_mean = truth.voice_mixing @ (s * shared + (1.0 - s) * z_voice)
        name = next(p for p, (lo, hi) in bounds.items() if lo <= identity < hi)
        for _ in range(config.videos_per_identity):
            faces = face_mean + config.noise_std * rng.standard_normal((config.faces_per_video, config.face_dim))
            voices = voice_mean + config.noise_std * rng.standard_normal((config.voices_per_video, config.voice_dim))
            partitions[name].append(VideoRecord(
                video_id=video_id,
                identity_id=identity,
                group=group,
                faces=faces.astype(np.float32).astype(np.float64),
                voices=voices.astype(np.float32).astype(np.float64),
            ))
            video_id += 1

    dataset = Dataset(config=config, partitions=partitions)
    dataset.validate()
    logger.info(
        f"Generated world seed={config.seed}: "
        + ", ".join(f"{row['partition']}={row['video']} videos/{row['id']} ids" for row in dataset.summary())
    )
    return dataset


def mixing_oracle_accuracy(dataset: Dataset, partition: str = "test") -> float:
    """
    Sanity oracle: pool each identity's faces and voices, unmix them with the
    ground-truth matrices, and pair faces to voices by nearest neighbour.

    Returns:
        Fraction of identities whose pooled face is paired with their own pooled voice
    """
    truth = draw_mixing(dataset.config)
    identities = sorted(dataset.identity_ids(partition))
    face_pool = {i: [] for i in identities}
    voice_pool = {i: [] for i in identities}
    for video in dataset.partition(partition):
        face_pool[video.identity_id].append(video.faces)
        voice_pool[video.identity_id].append(video.voices)
    faces = np.stack([np.concatenate(face_pool[i]).mean(axis=0) for i in identities])
    voices = np.stack([np.concatenate(voice_pool[i]).mean(axis=0) for i in identities])
    face_latent = faces @ np.linalg.pinv(truth.face_mixing).T
    voice_latent = voices @ np.linalg.pinv(truth.voice_mixing).T
    dists = ((face_latent[:, None, :] - voice_latent[None, :, :]) ** 2).sum(axis=-1)
    return float(np.mean(np.argmin(dists, axis=1) == np.arange(len(identities))))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """
    Write a dataset directory: manifest.json plus train.bin / val.bin / test.bin.

    Blob layout: magic "FAAD", version u32, vector count u64, then for each
    video its faces followed by its voices as little-endian float32 rows.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": BLOB_MAGIC.decode(),
        "version": BLOB_VERSION,
        "config": dataset.config.model_dump(mode="json"),
        "partitions": {},
    }
    for name in PARTITIONS:
        videos = dataset.partitions.get(name, [])
        manifest["partitions"][name] = [
            {
                "video_id": v.video_id,
                "identity_id": v.identity_id,
                "group": v.group,
                "num_faces": len(v.faces),
                "num_voices": len(v.voices),
            }
            for v in videos
        ]
        count = int(np.sum([len(v.faces) + len(v.voices) for v in videos]))
        with open(root / f"{name}.bin", "wb") as fh:
            fh.write(_HEADER.pack(BLOB_MAGIC, BLOB_VERSION, count))
            for v in videos:
                fh.write(np.asarray(v.faces, dtype="<f4").tobytes())
                fh.write(np.asarray(v.voices, dtype="<f4").tobytes())
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote dataset to {root}")


def read_dataset(path: Union[str, Path]) -> Dataset:
    """
    Read a dataset directory written by write_dataset.

    Raises:
        DatasetFormatError: If a blob has the wrong magic or version
        DatasetCorruptionError: If files are missing, truncated, or disagree with the manifest
        ConfigError: If a partition is empty or the stored config is invalid
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetCorruptionError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetCorruptionError(f"manifest is not valid JSON: {e}")
    if manifest.get("format") != BLOB_MAGIC.decode() or manifest.get("version") != BLOB_VERSION:
        raise DatasetFormatError(f"unsupported manifest format {manifest.get('format')} v{manifest.get('version')}")
    try:
        config = WorldConfig.model_validate(manifest["config"])
    except ValueError as e:
        raise ConfigError(f"manifest config: {e}")

    partitions: Dict[str, List[VideoRecord]] = {}
    for name in PARTITIONS:
        entries = manifest.get("partitions", {}).get(name)
        if not entries:
            raise ConfigError(f"partition '{name}' is empty on disk")
        partitions[name] = _read_blob(root / f"{name}.bin", entries, config)

    dataset = Dataset(config=config, partitions=partitions)
    dataset.validate()
    return dataset


def _read_blob(blob_path: Path, entries: List[Dict], config: WorldConfig) -> List[VideoRecord]:
    if not blob_path.exists():
        raise DatasetCorruptionError(f"missing blob {blob_path.name}")
    raw = blob_path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetCorruptionError(f"{blob_path.name}: truncated header")
    magic, version, count = _HEADER.unpack_from(raw, 0)
    if magic != BLOB_MAGIC:
        raise DatasetFormatError(f"{blob_path.name}: bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise DatasetFormatError(f"{blob_path.name}: unsupported version {version}")

    expected = int(np.sum([e["num_faces"] + e["num_voices"] for e in entries]))
    if expected != count:
        raise DatasetCorruptionError(
            f"{blob_path.name}: manifest references {expected} vectors but blob holds {count}"
        )
    body = raw[_HEADER.size:]
    need = 4 * int(np.sum([e["num_faces"] * config.face_dim + e["num_voices"] * config.voice_dim for e in entries]))
    if len(body) != need:
        raise DatasetCorruptionError(f"{blob_path.name}: expected {need} payload bytes, found {len(body)}")

    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    videos = []
    offset = 0
    for e in entries:
        n_face = e["num_faces"] * config.face_dim
        n_voice = e["num_voices"] * config.voice_dim
        faces = values[offset:offset + n_face].reshape(e["num_faces"], config.face_dim)
        offset += n_face
        voices = values[offset:offset + n_voice].reshape(e["num_voices"], config.voice_dim)
        offset += n_voice
        for modality, rows in (("face", faces), ("voice", voices)):
            bad = np.flatnonzero(~np.isfinite(rows).all(axis=1))
            if len(bad):
                raise DatasetCorruptionError(
                    f"{blob_path.stem}: video {e['video_id']} {modality} row {int(bad[0])} is not finite"
                )
        videos.append(VideoRecord(
            video_id=int(e["video_id"]),
            identity_id=int(e["identity_id"]),
            group=int(e["group"]),
            faces=faces.copy(),
            voices=voices.copy(),
        ))
    return videos
